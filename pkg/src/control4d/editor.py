"""Pluggable 2D editors driving dataset updates.

Two interchangeable editors: a deterministic synthetic one whose per-frame
inconsistency (global color shift + pixel noise) is controllable, and an
HTTP client speaking the wire protocol of a real editing service. Both
consume EditRequest and return EditedFrame. Images are [H, W, 3] float
tensors in [0, 1] throughout.
"""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from control4d.cameras import CameraModel
from control4d.errors import EditorTransportError, EmptyConditionError, ValidationError
from control4d.utils import seeded_generator, to_float, to_uint8

NOISE_MAX_DEFAULT = 0.8
NOISE_MIN_DEFAULT = 0.1


@dataclass
class EditRequest:
    render: torch.Tensor  # current render, upsampled or generator output
    original: torch.Tensor  # the captured frame
    condition: torch.Tensor  # normal map, encoded RGB
    prompt: str
    noise_level: float
    frame_id: int
    camera_id: str
    seed: int  # callers key this by training iteration

    def __post_init__(self):
        shapes = {tuple(x.shape) for x in (self.render, self.original, self.condition)}
        if len(shapes) != 1:
            raise ValidationError(f"edit request images disagree on resolution: {shapes}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValidationError(f"noise_level must be in [0, 1], got {self.noise_level}")


@dataclass
class EditedFrame:
    image: torch.Tensor  # RGB in [0, 1], same resolution as the request
    request: EditRequest
    editor_id: str
    iteration: int

    def __post_init__(self):
        if not torch.isfinite(self.image).all():
            raise ValidationError("edited image contains non-finite values")
        if tuple(self.image.shape) != tuple(self.request.render.shape):
            raise ValidationError("edited image resolution does not match the request")


def _default_style() -> list[list[float]]:
    # Warm grade with mild channel mixing: visually obvious, well inside [0,1]
    # for mid-tone inputs, and far from the identity map.
    return [
        [0.9, 0.15, 0.0, 0.10],
        [0.1, 0.80, 0.1, 0.05],
        [0.0, 0.10, 0.7, -0.05],
    ]


def identity_style() -> list[list[float]]:
    return [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]


@dataclass
class SyntheticEditorConfig:
    """A color affine "edit" plus controllable per-call inconsistency."""

    style_transform: list[list[float]] = field(default_factory=_default_style)
    jitter_std: float = 0.0
    detail_jitter_std: float = 0.0
    seed_base: int = 0

    def __post_init__(self):
        m = np.asarray(self.style_transform, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValidationError(f"style_transform must be 3x4, got {m.shape}")
        if self.jitter_std < 0 or self.detail_jitter_std < 0:
            raise ValidationError("jitter scales must be non-negative")


def synthetic_edit(req: EditRequest, cfg: SyntheticEditorConfig) -> EditedFrame:
    """Apply the style affine plus keyed jitter; pure in (request, config).

    The global color shift is drawn from N(0, jitter_std^2) keyed by
    (seed_base, frame_id, camera_id, seed) so repeated calls with the same
    keys are bitwise identical while distinct frames/iterations decorrelate.
    """
    m = torch.tensor(cfg.style_transform, dtype=req.original.dtype)
    styled = req.original @ m[:, :3].T + m[:, 3]
    if cfg.jitter_std > 0:
        gen = seeded_generator(cfg.seed_base, "edit-shift", req.frame_id, req.camera_id, req.seed)
        styled = styled + torch.randn(3, generator=gen, dtype=styled.dtype) * cfg.jitter_std
    if cfg.detail_jitter_std > 0 and req.noise_level > 0:
        gen = seeded_generator(cfg.seed_base, "edit-detail", req.frame_id, req.camera_id, req.seed)
        noise = torch.randn(styled.shape, generator=gen, dtype=styled.dtype)
        styled = styled + noise * cfg.detail_jitter_std * req.noise_level
    return EditedFrame(
        image=styled.clamp(0.0, 1.0),
        request=req,
        editor_id="synthetic",
        iteration=req.seed,
    )


class SyntheticEditor:
    """Callable wrapper so the training loop can hold one editor object."""

    def __init__(self, cfg: SyntheticEditorConfig | None = None):
        self.cfg = cfg if cfg is not None else SyntheticEditorConfig()
        self.editor_id = "synthetic"

    def edit(self, req: EditRequest) -> EditedFrame:
        return synthetic_edit(req, self.cfg)


def encode_png_b64(image: torch.Tensor | np.ndarray) -> str:
    """Float [H, W, 3] in [0, 1] -> base64 of an 8-bit RGB PNG."""
    from PIL import Image

    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    buf = io.BytesIO()
    Image.fromarray(to_uint8(arr)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(payload: str) -> torch.Tensor:
    from PIL import Image

    try:
        raw = base64.b64decode(payload, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise EditorTransportError(f"undecodable PNG payload: {exc}") from exc
    return torch.from_numpy(to_float(np.asarray(img)))


class RemoteEditor:
    """HTTP client for an external editing service.

    POSTs JSON to <endpoint>/edit and decodes the returned PNG; retries
    transient failures with exponential backoff before surfacing a
    transport error. A second condition slot is reserved in the protocol
    but unused here.
    """

    def __init__(
        self,
        endpoint: str,
        prompt: str = "",
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
    ):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.prompt = prompt
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.editor_id = f"remote:{self.endpoint}"
        self._session = requests.Session()

    def probe(self) -> None:
        """Check the endpoint is reachable before a long run starts.

        Any HTTP response counts as reachable; only connection-level
        failures raise. Per-request errors during training are handled
        as skips, this guards against launching with a dead endpoint.
        """
        import requests

        try:
            self._session.get(self.endpoint, timeout=min(self.timeout, 10.0))
        except requests.RequestException as exc:
            raise EditorTransportError(
                f"editor endpoint {self.endpoint} is unreachable: {exc}"
            ) from exc

    def edit(self, req: EditRequest) -> EditedFrame:
        import requests

        body = {
            "render_png_b64": encode_png_b64(req.render),
            "original_png_b64": encode_png_b64(req.original),
            "condition_png_b64": encode_png_b64(req.condition),
            "prompt": req.prompt,
            "noise_level": float(req.noise_level),
            "seed": int(req.seed),
        }
        last_err: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(
                    f"{self.endpoint}/edit", json=body, timeout=self.timeout
                )
                if resp.status_code != 200:
                    last_err = EditorTransportError(
                        f"editor endpoint returned HTTP {resp.status_code}"
                    )
                    continue
                data = resp.json()
                image = decode_png_b64(data["edited_png_b64"])
                return EditedFrame(
                    image=image.to(req.render.dtype),
                    request=req,
                    editor_id=str(data.get("editor_id", "remote")),
                    iteration=req.seed,
                )
            except (requests.RequestException, KeyError, ValueError, EditorTransportError) as exc:
                last_err = exc
        raise EditorTransportError(
            f"edit request failed after {self.retries} attempts: {last_err}"
        ) from last_err


def _grad2d(m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Central differences of [H, W, C] along width then height (one-sided edges)."""
    du = torch.empty_like(m)
    du[:, 1:-1] = (m[:, 2:] - m[:, :-2]) / 2
    du[:, 0] = m[:, 1] - m[:, 0]
    du[:, -1] = m[:, -1] - m[:, -2]
    dv = torch.empty_like(m)
    dv[1:-1] = (m[2:] - m[:-2]) / 2
    dv[0] = m[1] - m[0]
    dv[-1] = m[-1] - m[-2]
    return du, dv


def extract_normals(depth: torch.Tensor, cam: CameraModel) -> torch.Tensor:
    """Camera-space unit normals from a depth map, encoded to RGB as (n+1)/2.

    Depth is distance along the unit pixel ray (the renderer's convention),
    zero meaning background. Normals are oriented toward the camera
    (n_z > 0 after flipping); background pixels encode to mid-gray.
    """
    if depth.dim() != 2:
        raise ValidationError(f"depth map must be [H, W], got {tuple(depth.shape)}")
    if (depth <= 0).all():
        raise EmptyConditionError("all-zero depth map: no geometry to condition on")
    h, w = depth.shape
    dtype = depth.dtype
    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    dirs = torch.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, torch.ones_like(u)], dim=-1
    )
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    points = dirs * depth.unsqueeze(-1)
    dp_du, dp_dv = _grad2d(points)
    normal = torch.cross(dp_du, dp_dv, dim=-1)
    normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    normal = normal * torch.where(normal[..., 2:3] < 0, -1.0, 1.0)
    encoded = (normal + 1.0) / 2.0
    return torch.where((depth > 0).unsqueeze(-1), encoded, torch.full_like(encoded, 0.5))


def noise_schedule(
    iteration: int,
    total: int,
    n_max: float = NOISE_MAX_DEFAULT,
    n_min: float = NOISE_MIN_DEFAULT,
) -> float:
    """Linear decay from n_max at iteration 0 to n_min at `total`."""
    if not 0 <= iteration <= total:
        raise ValidationError(f"iteration {iteration} outside [0, {total}]")
    if n_min > n_max:
        raise ValidationError(f"noise bounds inverted: n_min {n_min} > n_max {n_max}")
    if total == 0:
        return float(n_min)
    frac = iteration / total
    return float(n_max + (n_min - n_max) * frac)
