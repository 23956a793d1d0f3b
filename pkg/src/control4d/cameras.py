"""Pinhole camera model, ray generation, and the camera-ring builder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from control4d.errors import ValidationError


@dataclass
class CameraModel:
    """World-to-camera pinhole camera.

    Camera space: x right, y down, z forward. Pixel (u, v) maps to the
    camera-space ray direction ((u - cx) / fx, (v - cy) / fy, 1).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # [3, 3] world-to-camera
    translation: np.ndarray  # [3]
    width: int
    height: int
    camera_id: str = "cam"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.camera_id}: focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5:
            raise ValidationError(f"camera {self.camera_id}: rotation not orthonormal ({err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-5:
            raise ValidationError(f"camera {self.camera_id}: rotation determinant {det:.6f} != +1")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int) -> "CameraModel":
        """The same camera re-rastered at a different resolution."""
        sx, sy = width / self.width, height / self.height
        return CameraModel(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            rotation=self.rotation.copy(),
            translation=self.translation.copy(),
            width=width,
            height=height,
            camera_id=self.camera_id,
        )

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict, fallback_id: str = "cam") -> "CameraModel":
        camera_id = str(d.get("camera_id", fallback_id))
        required = {"fx", "fy", "cx", "cy", "R", "t", "width", "height"}
        missing = required - set(d)
        if missing:
            raise ValidationError(f"camera {camera_id}: missing fields {sorted(missing)}")
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            camera_id=camera_id,
        )


@dataclass
class RayBatch:
    origins: torch.Tensor  # [N, 3]
    directions: torch.Tensor  # [N, 3], unit norm
    near: float
    far: float
    pixel_indices: torch.Tensor = field(default=None)  # [N] flat indices, row-major

    def __post_init__(self):
        if self.near >= self.far:
            raise ValidationError(f"ray batch: near {self.near} must be < far {self.far}")
        norms = self.directions.norm(dim=-1)
        if ((norms - 1).abs() > 1e-4).any():
            raise ValidationError("ray batch: directions must be unit norm")


def generate_rays(
    cam: CameraModel,
    near: float,
    far: float,
    pixel_indices: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> RayBatch:
    """One ray per pixel through the pinhole model (all pixels by default).

    pixel_indices selects a flat row-major subset; directions are normalized.
    """
    h, w = cam.height, cam.width
    if pixel_indices is None:
        pixel_indices = torch.arange(h * w)
    us = (pixel_indices % w).to(dtype)
    vs = torch.div(pixel_indices, w, rounding_mode="floor").to(dtype)
    dirs_cam = torch.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, torch.ones_like(us)], dim=-1
    )
    rot = torch.from_numpy(cam.rotation).to(dtype)
    dirs_world = dirs_cam @ rot  # R^T applied row-wise
    dirs_world = dirs_world / dirs_world.norm(dim=-1, keepdim=True)
    origin = torch.from_numpy(cam.position).to(dtype)
    origins = origin.expand_as(dirs_world).contiguous()
    return RayBatch(origins, dirs_world, near, far, pixel_indices)


def look_at_camera(
    position, target, width: int, height: int, focal_px: float, camera_id: str = "cam"
) -> CameraModel:
    """Camera at `position` looking at `target`, world +z as up."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValidationError("camera position coincides with its target")
    z_c = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(z_c, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x_c = np.cross(z_c, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    rotation = np.stack([x_c, y_c, z_c], axis=0)
    translation = -rotation @ position
    return CameraModel(
        fx=focal_px,
        fy=focal_px,
        cx=(width - 1) / 2,
        cy=(height - 1) / 2,
        rotation=rotation,
        translation=translation,
        width=width,
        height=height,
        camera_id=camera_id,
    )


def camera_ring(
    count: int,
    radius: float,
    elevation: float,
    width: int,
    height: int,
    focal_px: float,
    phase: float = 0.0,
) -> list[CameraModel]:
    """`count` cameras evenly spaced on a ring, all looking at the origin."""
    cams = []
    for i in range(count):
        angle = phase + 2 * np.pi * i / count
        pos = np.array([radius * np.cos(angle), radius * np.sin(angle), elevation])
        cams.append(
            look_at_camera(pos, np.zeros(3), width, height, focal_px, camera_id=f"cam{i:02d}")
        )
    return cams


def auto_near_far(cam: CameraModel, bounds: dict[str, tuple[float, float]]) -> tuple[float, float]:
    """Conservative near/far from the camera center and the scene's bounding sphere."""
    lo = np.array([bounds[a][0] for a in "xyz"])
    hi = np.array([bounds[a][1] for a in "xyz"])
    center = (lo + hi) / 2
    radius = float(np.linalg.norm(hi - lo) / 2) * 1.2
    dist = float(np.linalg.norm(cam.position - center))
    near = max(0.05, dist - radius)
    far = dist + radius
    return near, far
