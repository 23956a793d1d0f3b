"""Differentiable volume rendering of a scene field into image maps.

render_view produces a RenderPacket holding the low-resolution RGB render
plus per-pixel latent mean/std maps, depth, and alpha; sample_latent_map
draws a concrete latent map from the mean/std maps by reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from control4d.cameras import CameraModel, auto_near_far, generate_rays
from control4d.errors import ValidationError
from control4d.utils import check_finite, seeded_generator, to_uint8

DEPTH_EPS = 1e-8
WHITE = (1.0, 1.0, 1.0)


@dataclass
class RenderPacket:
    """Rendered maps for one (camera, time): all [H, W, ...] tensors."""

    rgb: torch.Tensor  # [H, W, 3] in [0, 1]
    latent_mean: torch.Tensor  # [H, W, C_l]
    latent_std: torch.Tensor  # [H, W, C_l], >= 0
    depth: torch.Tensor  # [H, W]
    alpha: torch.Tensor  # [H, W] in [0, 1]
    t: float
    camera_id: str
    seed: int


def composite(
    sigmas: torch.Tensor, deltas: torch.Tensor, values: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Alpha-composite per-sample payloads along rays.

    sigmas, deltas: [R, S]; values: [R, S, C]. Returns (payload [R, C],
    alpha [R], depth [R], weights [R, S]) where alpha_i = 1 - exp(-sigma_i
    delta_i), T_i is the exclusive product of (1 - alpha_j), weight_i =
    T_i alpha_i, and depth is the weight-averaged interval midpoint.
    """
    if (sigmas < 0).any():
        raise ValidationError("composite: negative density")
    if (deltas <= 0).any():
        raise ValidationError("composite: interval lengths must be positive")
    alphas = 1.0 - torch.exp(-sigmas * deltas)
    ones = torch.ones_like(alphas[:, :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alphas], dim=1), dim=1)[:, :-1]
    weights = transmittance * alphas
    payload = (weights.unsqueeze(-1) * values).sum(dim=1)
    alpha = weights.sum(dim=1)
    midpoints = torch.cumsum(deltas, dim=1) - deltas / 2
    depth = (weights * midpoints).sum(dim=1) / alpha.clamp_min(DEPTH_EPS)
    return payload, alpha, depth, weights


def _sample_depths(
    near: float,
    far: float,
    num_rays: int,
    samples_per_ray: int,
    stratified: bool,
    generator: torch.Generator | None,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stratified (or midpoint) sample positions and interval widths, [R, S] each."""
    edges = torch.linspace(near, far, samples_per_ray + 1, dtype=dtype)
    lo, hi = edges[:-1], edges[1:]
    if stratified:
        u = torch.rand(num_rays, samples_per_ray, generator=generator, dtype=dtype)
    else:
        u = torch.full((num_rays, samples_per_ray), 0.5, dtype=dtype)
    z = lo + u * (hi - lo)
    deltas = (hi - lo).expand(num_rays, samples_per_ray)
    return z, deltas


def render_rays(
    field,
    cam: CameraModel,
    t: float,
    samples_per_ray: int = 64,
    near: float | None = None,
    far: float | None = None,
    seed: int = 0,
    stratified: bool = True,
    background: tuple[float, float, float] = WHITE,
    pixel_indices: torch.Tensor | None = None,
    chunk_points: int = 65536,
    dtype: torch.dtype = torch.float32,
) -> dict[str, torch.Tensor]:
    """Volume-render a subset of `cam`'s pixels (all of them by default).

    `field` is anything exposing query(points [N,3], times [N], dirs [N,3])
    -> FieldSampleBatch and a latent_channels attribute; gradients flow to
    its parameters. Returns flat per-ray maps keyed rgb/latent_mean/
    latent_std/depth/alpha. The background color is composited into the
    RGB map only; latent maps keep a zero background.
    """
    if near is None or far is None:
        if not hasattr(field, "bounds"):
            raise ValidationError("render_rays needs explicit near/far for bound-less fields")
        near, far = auto_near_far(cam, field.bounds)
    rays = generate_rays(cam, near, far, pixel_indices=pixel_indices, dtype=dtype)
    num_rays = rays.origins.shape[0]
    gen = seeded_generator(seed, "strata", cam.camera_id, round(t, 9)) if stratified else None
    z, deltas = _sample_depths(near, far, num_rays, samples_per_ray, stratified, gen, dtype)

    points = rays.origins.unsqueeze(1) + rays.directions.unsqueeze(1) * z.unsqueeze(-1)
    dirs = rays.directions.unsqueeze(1).expand_as(points)
    flat_points = points.reshape(-1, 3)
    flat_dirs = dirs.reshape(-1, 3)
    times = torch.full((flat_points.shape[0],), float(t), dtype=dtype)

    sigmas, rgbs, means, stds = [], [], [], []
    for start in range(0, flat_points.shape[0], chunk_points):
        sl = slice(start, start + chunk_points)
        out = field.query(flat_points[sl], times[sl], flat_dirs[sl])
        sigmas.append(out.sigma)
        rgbs.append(out.rgb)
        means.append(out.latent_mean)
        stds.append(out.latent_std)
    sigma = torch.cat(sigmas).reshape(num_rays, samples_per_ray)
    c_l = field.latent_channels
    payload = torch.cat(
        [
            torch.cat(rgbs).reshape(num_rays, samples_per_ray, 3),
            torch.cat(means).reshape(num_rays, samples_per_ray, c_l),
            torch.cat(stds).reshape(num_rays, samples_per_ray, c_l),
        ],
        dim=-1,
    )
    rendered, alpha, depth, _ = composite(sigma, deltas, payload)
    depth = depth + near  # composite midpoints start at the near plane

    bg = torch.tensor(background, dtype=dtype)
    rgb = rendered[:, :3] + (1.0 - alpha).unsqueeze(-1) * bg
    return {
        "rgb": rgb,
        "latent_mean": rendered[:, 3 : 3 + c_l],
        "latent_std": rendered[:, 3 + c_l :],
        "depth": depth * (alpha > 1e-4),
        "alpha": alpha,
        # raw density average per ray, cheap hook for sparsity penalties
        "sigma_mean": sigma.mean(dim=1),
    }


def render_view(
    field,
    cam: CameraModel,
    t: float,
    samples_per_ray: int = 64,
    near: float | None = None,
    far: float | None = None,
    seed: int = 0,
    stratified: bool = True,
    background: tuple[float, float, float] = WHITE,
    chunk_points: int = 65536,
    dtype: torch.dtype = torch.float32,
) -> RenderPacket:
    """Volume-render every pixel of `cam` at time `t` into a RenderPacket."""
    maps = render_rays(
        field,
        cam,
        t,
        samples_per_ray=samples_per_ray,
        near=near,
        far=far,
        seed=seed,
        stratified=stratified,
        background=background,
        chunk_points=chunk_points,
        dtype=dtype,
    )
    h, w = cam.height, cam.width
    c_l = field.latent_channels
    check_finite("rendered view", maps["rgb"])
    return RenderPacket(
        rgb=maps["rgb"].reshape(h, w, 3),
        latent_mean=maps["latent_mean"].reshape(h, w, c_l),
        latent_std=maps["latent_std"].reshape(h, w, c_l),
        depth=maps["depth"].reshape(h, w),
        alpha=maps["alpha"].reshape(h, w),
        t=float(t),
        camera_id=cam.camera_id,
        seed=seed,
    )


def sample_latent_map(pkt: RenderPacket, seed, per_pixel: bool = False) -> torch.Tensor:
    """Draw a latent map from the packet's mean/std by reparameterization.

    One standard-normal scalar per rendered image by default (per_pixel=True
    draws one scalar per pixel instead). Deterministic given the seed, which
    may be an int or any hashable key tuple.
    """
    if (pkt.latent_std < 0).any():
        raise ValidationError("latent std map must be non-negative")
    gen = seeded_generator(seed, "latent-draw")
    dtype = pkt.latent_mean.dtype
    if per_pixel:
        h, w, _ = pkt.latent_mean.shape
        draw = torch.randn(h, w, 1, generator=gen, dtype=dtype)
    else:
        draw = torch.randn((), generator=gen, dtype=dtype)
    return pkt.latent_mean + draw * pkt.latent_std


def save_packet(pkt: RenderPacket, out_dir, stem: str) -> None:
    """Export a packet: 8-bit PNGs for RGB/alpha, float32 .npy for the rest."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = to_uint8(pkt.rgb.detach().cpu().numpy())
    Image.fromarray(rgb).save(out_dir / f"{stem}.png")
    Image.fromarray(to_uint8(pkt.alpha.detach().cpu().numpy())).save(
        out_dir / f"{stem}_alpha.png"
    )
    np.save(out_dir / f"{stem}_latent_mean.npy", pkt.latent_mean.detach().cpu().numpy())
    np.save(out_dir / f"{stem}_latent_std.npy", pkt.latent_std.detach().cpu().numpy())
    np.save(out_dir / f"{stem}_depth.npy", pkt.depth.detach().cpu().numpy())
