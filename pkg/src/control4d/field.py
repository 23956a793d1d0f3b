"""The dynamic scene field: a learned flow into a canonical space plus
canonical heads for density, color, and per-point latent distributions."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from control4d.encoding import PositionalEncoding
from control4d.planes import PlaneAtlas, make_canonical_atlas, make_flow_atlas
from control4d.utils import seeded_generator

CANONICAL_EXPANSION = 1.5  # warp targets may exceed scene bounds by this factor


@dataclass
class FieldSampleBatch:
    """Per-point field outputs: density, color, latent mean/std."""

    sigma: torch.Tensor  # [N]
    rgb: torch.Tensor  # [N, 3]
    latent_mean: torch.Tensor  # [N, C_l]
    latent_std: torch.Tensor  # [N, C_l]


class MLP(nn.Module):
    """Plain fully-connected stack with LeakyReLU hidden activations."""

    def __init__(self, dims: list[int], generator: torch.Generator | None = None):
        super().__init__()
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
        self.layers = nn.ModuleList(layers)
        if generator is not None:
            with torch.no_grad():
                for lin in self.layers:
                    nn.init.kaiming_uniform_(lin.weight, a=0.2, generator=generator)
                    lin.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


class FlowField(nn.Module):
    """Warps a spacetime point (x, y, z, t) to a canonical 3D coordinate.

    The warp is a residual on (x, y, z) predicted from 4D plane features plus
    a positional encoding of the input; the residual head's final layer is
    zero-initialized so the warp starts as the identity. Outputs are clipped
    to an expanded canonical box and the clips are counted.
    """

    def __init__(
        self,
        bounds: dict[str, tuple[float, float]],
        plane_channels: int = 16,
        spatial_res: int = 32,
        t_res: int = 16,
        num_frequencies: int = 6,
        hidden: int = 64,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.atlas = make_flow_atlas(
            bounds, spatial_res=spatial_res, t_res=t_res, channels=plane_channels,
            generator=generator,
        )
        self.encoding = PositionalEncoding(num_frequencies=num_frequencies, include_input=True)
        in_dim = plane_channels + self.encoding.output_dim(4)
        self.head = MLP([in_dim, hidden, hidden, 3], generator=generator)
        with torch.no_grad():
            self.head.layers[-1].weight.zero_()
            self.head.layers[-1].bias.zero_()
        lo = torch.tensor([bounds[a][0] for a in "xyz"])
        hi = torch.tensor([bounds[a][1] for a in "xyz"])
        center, half = (lo + hi) / 2, (hi - lo) / 2
        self.register_buffer("canonical_lo", center - CANONICAL_EXPANSION * half)
        self.register_buffer("canonical_hi", center + CANONICAL_EXPANSION * half)
        self.register_buffer("clip_count", torch.zeros((), dtype=torch.long))

    def forward(self, points: torch.Tensor, times: torch.Tensor) -> torch.Tensor:
        """points [N, 3], times [N] -> canonical coordinates [N, 3]."""
        coords = torch.cat([points, times.unsqueeze(-1)], dim=-1)
        feat = self.atlas.sample(coords)
        enc = self.encoding(coords)
        residual = self.head(torch.cat([feat, enc], dim=-1))
        warped = points + residual
        lo = self.canonical_lo.to(warped.dtype)
        hi = self.canonical_hi.to(warped.dtype)
        out_of_box = (warped < lo) | (warped > hi)
        if out_of_box.any():
            self.clip_count += int(out_of_box.any(dim=-1).sum())
            warped = torch.clamp(warped, min=lo, max=hi)
        return warped


class CanonicalField(nn.Module):
    """Canonical-space heads: density, appearance color, latent mean/std.

    High- and low-resolution plane features are summed before the geometry
    trunk. Density and latent std go through softplus, color through sigmoid.
    """

    def __init__(
        self,
        bounds: dict[str, tuple[float, float]],
        plane_channels: int = 16,
        hr_res: int = 128,
        lr_res: int = 64,
        appearance_channels: int = 16,
        latent_channels: int = 8,
        hidden: int = 64,
        sigma_bias: float = -1.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.atlas_hr = make_canonical_atlas(bounds, hr_res, plane_channels, generator=generator)
        self.atlas_lr = make_canonical_atlas(bounds, lr_res, plane_channels, generator=generator)
        self.latent_channels = latent_channels
        self.trunk = MLP([plane_channels, hidden, hidden], generator=generator)
        self.sigma_head = nn.Linear(hidden, 1)
        self.feature_head = nn.Linear(hidden, appearance_channels)
        self.latent_mean_head = nn.Linear(hidden, latent_channels)
        self.latent_std_head = nn.Linear(hidden, latent_channels)
        self.color_head = MLP([appearance_channels + 3, hidden, 3], generator=generator)
        with torch.no_grad():
            for head in (self.sigma_head, self.feature_head,
                         self.latent_mean_head, self.latent_std_head):
                nn.init.uniform_(head.weight, -1e-2, 1e-2, generator=generator)
                head.bias.zero_()
            self.sigma_head.bias.fill_(sigma_bias)

    def forward(self, canonical: torch.Tensor, view_dirs: torch.Tensor) -> FieldSampleBatch:
        feat = self.atlas_hr.sample(canonical) + self.atlas_lr.sample(canonical)
        h = F.leaky_relu(self.trunk(feat), 0.2)
        sigma = F.softplus(self.sigma_head(h)).squeeze(-1)
        appearance = self.feature_head(h)
        latent_mean = self.latent_mean_head(h)
        latent_std = F.softplus(self.latent_std_head(h))
        rgb = torch.sigmoid(self.color_head(torch.cat([appearance, view_dirs], dim=-1)))
        return FieldSampleBatch(sigma, rgb, latent_mean, latent_std)


class SceneField(nn.Module):
    """Flow + canonical field composed into a queryable 4D scene."""

    def __init__(
        self,
        bounds: dict[str, tuple[float, float]],
        plane_channels: int = 16,
        canonical_hr_res: int = 128,
        canonical_lr_res: int = 64,
        flow_spatial_res: int = 32,
        flow_t_res: int = 16,
        flow_frequencies: int = 6,
        appearance_channels: int = 16,
        latent_channels: int = 8,
        hidden: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        gen = seeded_generator(seed, "scene-field")
        self.bounds = {a: (float(bounds[a][0]), float(bounds[a][1])) for a in "xyz"}
        canonical_bounds = {
            a: (
                (lo + hi) / 2 - CANONICAL_EXPANSION * (hi - lo) / 2,
                (lo + hi) / 2 + CANONICAL_EXPANSION * (hi - lo) / 2,
            )
            for a, (lo, hi) in self.bounds.items()
        }
        self.flow = FlowField(
            self.bounds,
            plane_channels=plane_channels,
            spatial_res=flow_spatial_res,
            t_res=flow_t_res,
            num_frequencies=flow_frequencies,
            hidden=hidden,
            generator=gen,
        )
        self.canonical = CanonicalField(
            canonical_bounds,
            plane_channels=plane_channels,
            hr_res=canonical_hr_res,
            lr_res=canonical_lr_res,
            appearance_channels=appearance_channels,
            latent_channels=latent_channels,
            hidden=hidden,
            generator=gen,
        )
        self.latent_channels = latent_channels
        self.register_buffer("non_unit_dir_count", torch.zeros((), dtype=torch.long))
        self.register_buffer("bounds_lo", torch.tensor([self.bounds[a][0] for a in "xyz"]))
        self.register_buffer("bounds_hi", torch.tensor([self.bounds[a][1] for a in "xyz"]))

    def query(
        self, points: torch.Tensor, times: torch.Tensor, view_dirs: torch.Tensor
    ) -> FieldSampleBatch:
        """points [N, 3], times scalar or [N], view_dirs [N, 3] (unit norm)."""
        times = torch.as_tensor(times, dtype=points.dtype, device=points.device)
        if times.ndim == 0:
            times = times.expand(points.shape[0])
        norms = view_dirs.norm(dim=-1)
        bad = (norms - 1).abs() > 1e-4
        if bad.any():
            self.non_unit_dir_count += int(bad.sum())
            view_dirs = view_dirs / norms.unsqueeze(-1).clamp_min(1e-12)
        canonical = self.flow(points, times)
        out = self.canonical(canonical, view_dirs)
        # the scene has bounded support: density vanishes outside the box,
        # otherwise training rays tune border-clamped values per camera and
        # novel views see the disagreement as floaters
        lo = self.bounds_lo.to(points.dtype)
        hi = self.bounds_hi.to(points.dtype)
        inside = ((points >= lo) & (points <= hi)).all(dim=-1)
        return FieldSampleBatch(
            out.sigma * inside.to(out.sigma.dtype),
            out.rgb,
            out.latent_mean,
            out.latent_std,
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named parameter groups used by staged training and optimizers."""
        return {
            "flow": list(self.flow.parameters()),
            "canonical": list(self.canonical.parameters()),
        }
