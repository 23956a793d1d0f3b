"""Small shared helpers: deterministic seeding, image conversion, finiteness checks."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from control4d.errors import NumericalError


def stable_seed(*keys) -> int:
    """Derive a 63-bit seed from a tuple of keys, stable across processes.

    Python's builtin hash() is salted per process, so all reproducibility-
    critical RNG streams are keyed through this instead.
    """
    payload = "\x1f".join(repr(k) for k in keys).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def seeded_generator(*keys) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stable_seed(*keys))
    return gen


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8-bit."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    """Inverse of to_uint8 (also passes float arrays through unchanged)."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def check_finite(name: str, *tensors) -> None:
    for t in tensors:
        if isinstance(t, torch.Tensor):
            ok = bool(torch.isfinite(t).all())
        else:
            ok = bool(np.isfinite(np.asarray(t)).all())
        if not ok:
            raise NumericalError(f"non-finite values in {name}")


def upsample_image(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear-upsample an [H, W, C] tensor by an integer factor."""
    x = img.permute(2, 0, 1).unsqueeze(0)
    x = torch.nn.functional.interpolate(
        x, scale_factor=factor, mode="bilinear", align_corners=False
    )
    return x.squeeze(0).permute(1, 2, 0)


def hwc_to_bchw(img: torch.Tensor) -> torch.Tensor:
    """[H, W, C] -> [1, C, H, W]."""
    return img.permute(2, 0, 1).unsqueeze(0)


def bchw_to_hwc(img: torch.Tensor) -> torch.Tensor:
    """[1, C, H, W] -> [H, W, C]."""
    return img.squeeze(0).permute(1, 2, 0)


def param_checksum(params) -> str:
    """Hex digest over parameter bytes, for freeze-contract verification."""
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def resize_image_np(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize an [H, W, C] float array to (H_out, W_out)."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    x = torch.nn.functional.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.squeeze(0).permute(1, 2, 0).numpy()
