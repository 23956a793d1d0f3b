"""Evaluation metrics: PSNR, excess temporal flicker, Laplacian sharpness."""

from __future__ import annotations

import math

import torch
from torch.nn import functional as F

from control4d.errors import ValidationError

PSNR_SENTINEL = 99.0


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.double() if t.is_floating_point() else t


def psnr(a, b, mask=None, sentinel: float = PSNR_SENTINEL) -> float:
    """-10 log10(MSE) for unit-range images; identical inputs hit the sentinel."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    err = (a - b) ** 2
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool)
        while m.dim() < err.dim():
            m = m.unsqueeze(-1)
        m = m.expand_as(err)
        if not m.any():
            raise ValidationError("psnr mask selects no pixels")
        err = err[m]
    mse = err.mean().item()
    if mse == 0.0:
        return sentinel
    return min(-10.0 * math.log10(mse), sentinel)


def _frame_masks(mask, t_frames: int, shape) -> list[torch.Tensor | None]:
    if mask is None:
        return [None] * t_frames
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.dim() == 2:
        return [m] * t_frames
    if m.dim() == 3 and m.shape[0] == t_frames:
        return list(m)
    raise ValidationError(f"mask shape {tuple(m.shape)} fits neither [H,W] nor [T,H,W]")


def _mean_step_rms(video: torch.Tensor, masks) -> float:
    total = 0.0
    for i in range(video.shape[0] - 1):
        diff = (video[i + 1] - video[i]) ** 2
        if masks[i] is not None:
            m = (masks[i] & masks[i + 1]).unsqueeze(-1).expand_as(diff)
            if not m.any():
                continue
            diff = diff[m]
        total += diff.mean().sqrt().item()
    return total / (video.shape[0] - 1)


def temporal_flicker(video, gt, mask=None) -> float:
    """Consecutive-frame masked RMS of `video` minus the same statistic on `gt`.

    Both are [T, H, W, 3]; mask is [H, W] or [T, H, W] (intersection of the
    two frames of each step is used). Positive values mean the rendering
    flickers beyond what the scene itself moves.
    """
    video, gt = _as_tensor(video), _as_tensor(gt)
    if video.shape != gt.shape:
        raise ValidationError(
            f"flicker shape mismatch: {tuple(video.shape)} vs {tuple(gt.shape)}"
        )
    if video.dim() != 4 or video.shape[0] < 2:
        raise ValidationError("flicker needs [T, H, W, 3] video with T >= 2")
    masks = _frame_masks(mask, video.shape[0], video.shape)
    return _mean_step_rms(video, masks) - _mean_step_rms(gt, masks)


_LAPLACIAN = torch.tensor(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64
)


def laplacian_variance(image, mask=None) -> float:
    """Variance of the Laplacian of the luma channel; higher = sharper."""
    img = _as_tensor(image)
    if img.dim() == 3:
        img = img.mean(dim=-1)  # luma as plain channel mean
    if img.dim() != 2:
        raise ValidationError(f"expected [H, W] or [H, W, C] image, got {tuple(img.shape)}")
    lap = F.conv2d(img[None, None], _LAPLACIAN[None, None])[0, 0]
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool)[1:-1, 1:-1]
        if not m.any():
            raise ValidationError("sharpness mask selects no interior pixels")
        lap = lap[m]
    return lap.var(unbiased=False).item()


def video_sharpness(video, mask=None) -> float:
    """Mean laplacian_variance over frames of a [T, H, W, 3] video."""
    video = _as_tensor(video)
    masks = _frame_masks(mask, video.shape[0], video.shape)
    vals = [laplacian_variance(video[i], masks[i]) for i in range(video.shape[0])]
    return sum(vals) / len(vals)
