"""Factored feature fields stored as collections of 2D feature planes.

A 4D field over (x, y, z, t) is the sum of three branches, each branch the
elementwise product of a spatial-plane sample and its complementary-plane
sample: xy*zt + xz*yt + yz*xt. A 3D field is the sum of the xy, xz and yz
plane samples. All plane lookups are bilinear with border clamping.
"""

from __future__ import annotations

import torch
from torch import nn

from control4d.errors import ValidationError

AXES_4D = "xyzt"
AXES_3D = "xyz"

FOUR_D_BRANCHES = (("xy", "zt"), ("xz", "yt"), ("yz", "xt"))
THREE_D_BRANCHES = (("xy",), ("xz",), ("yz",))


def _bilinear(plane: torch.Tensor, gu: torch.Tensor, gv: torch.Tensor) -> torch.Tensor:
    """Sample a [C, H, W] grid at fractional coordinates (gu, gv), each [N].

    gu indexes the first spatial dim, gv the second; both are already clamped
    to [0, size - 1]. Differentiable in both the grid values and (gu, gv).
    """
    c, h, w = plane.shape
    i0 = gu.detach().floor().clamp(0, h - 1).long()
    j0 = gv.detach().floor().clamp(0, w - 1).long()
    i1 = (i0 + 1).clamp(max=h - 1)
    j1 = (j0 + 1).clamp(max=w - 1)
    fu = (gu - i0.to(gu.dtype)).unsqueeze(-1)
    fv = (gv - j0.to(gv.dtype)).unsqueeze(-1)

    flat = plane.reshape(c, h * w)

    def corner(ii, jj):
        return flat[:, ii * w + jj].transpose(0, 1)  # [N, C]

    top = corner(i0, j0) * (1 - fv) + corner(i0, j1) * fv
    bot = corner(i1, j0) * (1 - fv) + corner(i1, j1) * fv
    return top * (1 - fu) + bot * fu


class PlaneAtlas(nn.Module):
    """An ordered set of 2D feature planes factorizing a 3D or 4D field.

    Args:
        axes: "xyz" or "xyzt"; also fixes the coordinate column order.
        bounds: per-axis (lo, hi) in world units; t is always (0, 1).
        resolutions: per-plane (H, W), one entry per plane in branch order.
        channels: feature channels shared by every plane.
        init_scale: stddev of the Gaussian plane initialization.
        generator: torch RNG used for the initialization.
    """

    def __init__(
        self,
        axes: str,
        bounds: dict[str, tuple[float, float]],
        resolutions: list[tuple[int, int]],
        channels: int,
        init_scale: float = 0.1,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if axes == AXES_4D:
            self.branches = FOUR_D_BRANCHES
        elif axes == AXES_3D:
            self.branches = THREE_D_BRANCHES
        else:
            raise ValidationError(f"unsupported atlas axes {axes!r}")
        self.axes = axes
        self.plane_axes = [p for branch in self.branches for p in branch]
        covered = set("".join(self.plane_axes))
        if covered != set(axes):
            raise ValidationError(f"plane axes {covered} do not span {set(axes)}")
        if len(resolutions) != len(self.plane_axes):
            raise ValidationError(
                f"expected {len(self.plane_axes)} plane resolutions, got {len(resolutions)}"
            )
        for ax in axes:
            if ax == "t":
                bounds = {**bounds, "t": (0.0, 1.0)}
            elif ax not in bounds:
                raise ValidationError(f"missing bounds for axis {ax!r}")
        self.bounds = {ax: (float(bounds[ax][0]), float(bounds[ax][1])) for ax in axes}
        self.channels = channels

        planes = []
        for (h, w) in resolutions:
            weight = torch.randn(channels, h, w, generator=generator) * init_scale
            planes.append(nn.Parameter(weight))
        self.planes = nn.ParameterList(planes)

    def validate(self) -> None:
        for name, plane in zip(self.plane_axes, self.planes):
            if not torch.isfinite(plane).all():
                raise ValidationError(f"plane {name} contains non-finite values")

    def _grid_coord(self, values: torch.Tensor, axis: str, size: int) -> torch.Tensor:
        lo, hi = self.bounds[axis]
        g = (values - lo) / (hi - lo) * (size - 1)
        return g.clamp(0, size - 1)

    def sample(self, coords: torch.Tensor) -> torch.Tensor:
        """Evaluate the factored field at a [..., D] coordinate batch -> [..., C].

        Coordinates outside the bounds are clamped to the border.
        """
        lead = coords.shape[:-1]
        flat = coords.reshape(-1, coords.shape[-1])
        if flat.shape[-1] != len(self.axes):
            raise ValidationError(
                f"atlas over {self.axes!r} queried with {flat.shape[-1]}-d coordinates"
            )
        if not torch.isfinite(flat).all():
            raise ValidationError("atlas query coordinates must be finite")

        col = {ax: i for i, ax in enumerate(self.axes)}
        total = None
        plane_idx = 0
        for branch in self.branches:
            prod = None
            for pair in branch:
                plane = self.planes[plane_idx]
                au, av = pair[0], pair[1]
                gu = self._grid_coord(flat[:, col[au]], au, plane.shape[1])
                gv = self._grid_coord(flat[:, col[av]], av, plane.shape[2])
                s = _bilinear(plane, gu, gv)
                prod = s if prod is None else prod * s
                plane_idx += 1
            total = prod if total is None else total + prod
        return total.reshape(*lead, self.channels)


def make_flow_atlas(
    bounds: dict[str, tuple[float, float]],
    spatial_res: int = 32,
    t_res: int = 16,
    channels: int = 16,
    generator: torch.Generator | None = None,
) -> PlaneAtlas:
    """4D atlas for the flow field; planes touching t use the coarser t resolution."""
    resolutions = []
    for branch in FOUR_D_BRANCHES:
        for pair in branch:
            h = t_res if pair[0] == "t" else spatial_res
            w = t_res if pair[1] == "t" else spatial_res
            resolutions.append((h, w))
    return PlaneAtlas(AXES_4D, bounds, resolutions, channels, generator=generator)


def make_canonical_atlas(
    bounds: dict[str, tuple[float, float]],
    res: int,
    channels: int = 16,
    generator: torch.Generator | None = None,
) -> PlaneAtlas:
    """3D atlas over the canonical space at a single spatial resolution."""
    resolutions = [(res, res)] * 3
    return PlaneAtlas(AXES_3D, bounds, resolutions, channels, generator=generator)
