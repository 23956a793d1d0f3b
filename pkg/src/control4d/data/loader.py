"""Multi-view video dataset ingestion.

Layout: <root>/cams.json holds an array of camera dicts (fx, fy, cx, cy,
R row-major 9, t 3, width, height, camera_id); frames live under
frames/<camera_id>/<frame>.png with integer stems, optional foreground
masks under masks/<camera_id>/<frame>.png (8-bit grayscale, >127 = fg).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from control4d.cameras import CameraModel
from control4d.errors import SchemaError, ValidationError
from control4d.utils import to_float, to_uint8


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    t: float  # normalized time in [0, 1], increasing with frame_id
    camera_id: str
    image_path: Path
    mask_path: Path | None


def load_image(path: Path | str) -> torch.Tensor:
    """8-bit RGB PNG -> [H, W, 3] float tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return torch.from_numpy(to_float(arr))


def load_mask(path: Path | str) -> torch.Tensor:
    """8-bit grayscale PNG -> [H, W] bool tensor (>127 is foreground)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return torch.from_numpy(arr > 127)


def save_image(path: Path | str, image) -> None:
    """Float [H, W, 3] (or [H, W]) array in [0, 1] -> 8-bit PNG."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path)


def _check_image_size(path: Path, cam: CameraModel, errors: list[str]) -> None:
    try:
        with Image.open(path) as img:
            if img.size != (cam.width, cam.height):
                errors.append(
                    f"{path}: size {img.size} does not match camera "
                    f"{cam.camera_id} ({cam.width}x{cam.height})"
                )
    except Exception as exc:
        errors.append(f"{path}: unreadable image ({exc})")


def load_dataset(root: Path | str) -> tuple[list[FrameRecord], dict[str, CameraModel]]:
    """Load and validate a dataset tree, reporting every violation at once."""
    root = Path(root)
    errors: list[str] = []
    if not root.is_dir():
        raise SchemaError(f"dataset root {root} is not a directory")

    cams_path = root / "cams.json"
    cams: dict[str, CameraModel] = {}
    if not cams_path.is_file():
        errors.append(f"missing calibration file {cams_path}")
    else:
        try:
            raw = json.loads(cams_path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{cams_path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, list) or not raw:
            errors.append(f"{cams_path}: expected a non-empty array of cameras")
            raw = []
        for i, entry in enumerate(raw):
            try:
                cam = CameraModel.from_dict(entry, fallback_id=f"cam{i:02d}")
            except (ValidationError, KeyError, TypeError) as exc:
                errors.append(f"{cams_path}[{i}]: {exc}")
                continue
            if cam.camera_id in cams:
                errors.append(f"{cams_path}: duplicate camera_id {cam.camera_id!r}")
            cams[cam.camera_id] = cam

    per_cam_frames: dict[str, dict[int, Path]] = {}
    for cam_id, cam in cams.items():
        cam_dir = root / "frames" / cam_id
        if not cam_dir.is_dir():
            errors.append(f"missing frame directory {cam_dir}")
            continue
        frames: dict[int, Path] = {}
        for png in sorted(cam_dir.glob("*.png")):
            try:
                frame_id = int(png.stem)
            except ValueError:
                errors.append(f"{png}: frame filename stem is not an integer")
                continue
            frames[frame_id] = png
            _check_image_size(png, cam, errors)
        if not frames:
            errors.append(f"{cam_dir}: no frames found")
        per_cam_frames[cam_id] = frames

    frame_sets = {cam_id: frozenset(frames) for cam_id, frames in per_cam_frames.items()}
    if len(set(frame_sets.values())) > 1:
        counts = {cam_id: len(s) for cam_id, s in frame_sets.items()}
        errors.append(f"cameras disagree on frame ids: counts {counts}")

    if errors:
        raise SchemaError("dataset validation failed:\n  " + "\n  ".join(errors))

    frame_ids = sorted(next(iter(frame_sets.values()))) if frame_sets else []
    denom = max(len(frame_ids) - 1, 1)
    records = []
    for cam_id in sorted(cams):
        for idx, frame_id in enumerate(frame_ids):
            mask = root / "masks" / cam_id / f"{frame_id}.png"
            records.append(
                FrameRecord(
                    frame_id=frame_id,
                    t=idx / denom,
                    camera_id=cam_id,
                    image_path=per_cam_frames[cam_id][frame_id],
                    mask_path=mask if mask.is_file() else None,
                )
            )
    return records, cams
