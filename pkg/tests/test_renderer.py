import math

import numpy as np
import pytest
import torch

from control4d.cameras import CameraModel
from control4d.errors import ValidationError
from control4d.field import FieldSampleBatch
from control4d.renderer import (
    RenderPacket,
    composite,
    render_view,
    sample_latent_map,
    save_packet,
)

from conftest import make_field


class SlabField:
    """Constant density sigma inside z in [z0, z1], zero elsewhere."""

    latent_channels = 2

    def __init__(self, sigma, z0, z1, rgb=(0.2, 0.5, 0.8)):
        self.sigma = sigma
        self.z0 = z0
        self.z1 = z1
        self.rgb = torch.tensor(rgb)
        self.bounds = {"x": (-1, 1), "y": (-1, 1), "z": (z0, z1)}

    def query(self, points, times, dirs):
        inside = (points[:, 2] >= self.z0) & (points[:, 2] <= self.z1)
        sigma = inside.to(points.dtype) * self.sigma
        rgb = self.rgb.to(points.dtype).expand(points.shape[0], 3)
        mean = torch.zeros(points.shape[0], 2, dtype=points.dtype)
        std = torch.zeros(points.shape[0], 2, dtype=points.dtype)
        return FieldSampleBatch(sigma, rgb, mean, std)


class ZeroField(SlabField):
    def __init__(self):
        super().__init__(0.0, 0.0, 1.0)


def axial_camera(size=8, focal=400.0):
    return CameraModel(
        fx=focal, fy=focal, cx=(size - 1) / 2, cy=(size - 1) / 2,
        rotation=np.eye(3), translation=np.zeros(3),
        width=size, height=size, camera_id="axial",
    )


# ---- composite ------------------------------------------------------------


def test_composite_empty_space():
    sigmas = torch.zeros(3, 5)
    deltas = torch.full((3, 5), 0.2)
    values = torch.rand(3, 5, 4)
    payload, alpha, depth, weights = composite(sigmas, deltas, values)
    assert torch.equal(payload, torch.zeros(3, 4))
    assert torch.equal(alpha, torch.zeros(3))
    assert torch.equal(weights, torch.zeros(3, 5))


def test_composite_opaque_first_hit():
    sigmas = torch.tensor([[50.0, 1.0, 1.0]])
    deltas = torch.ones(1, 3)
    values = torch.tensor([[[0.9], [0.1], [0.4]]])
    payload, alpha, depth, weights = composite(sigmas, deltas, values)
    assert weights[0, 0].item() == pytest.approx(1.0, abs=1e-6)
    assert alpha.item() == pytest.approx(1.0, abs=1e-6)
    assert payload.item() == pytest.approx(0.9, abs=1e-5)
    # the first interval's midpoint
    assert depth.item() == pytest.approx(0.5, abs=1e-5)


def test_composite_two_sample_hand_case():
    # sigma * delta = ln 2 twice: a1 = 0.5, w2 = 0.5 * 0.5, alpha = 0.75
    sigmas = torch.full((1, 2), math.log(2.0), dtype=torch.float64)
    deltas = torch.ones(1, 2, dtype=torch.float64)
    values = torch.tensor([[[1.0], [0.0]]], dtype=torch.float64)
    payload, alpha, _, weights = composite(sigmas, deltas, values)
    assert alpha.item() == pytest.approx(0.75, abs=1e-12)
    assert payload.item() == pytest.approx(0.5, abs=1e-12)
    assert weights[0, 0].item() == pytest.approx(0.5, abs=1e-12)
    assert weights[0, 1].item() == pytest.approx(0.25, abs=1e-12)


def test_composite_rejects_bad_inputs():
    values = torch.rand(1, 3, 1)
    with pytest.raises(ValidationError):
        composite(torch.tensor([[0.1, -0.2, 0.3]]), torch.ones(1, 3), values)
    with pytest.raises(ValidationError):
        composite(torch.rand(1, 3), torch.tensor([[0.1, 0.0, 0.1]]), values)


def test_composite_weights_form_subprobability():
    gen = torch.Generator().manual_seed(2)
    for _ in range(20):
        sigmas = torch.rand(4, 9, generator=gen) * 5
        deltas = torch.rand(4, 9, generator=gen) * 0.4 + 0.01
        values = torch.rand(4, 9, 2, generator=gen)
        _, alpha, _, weights = composite(sigmas, deltas, values)
        assert (weights >= 0).all()
        assert (alpha <= 1 + 1e-6).all()
        assert torch.allclose(weights.sum(dim=1), alpha)


def test_composite_zero_density_sample_is_inert():
    gen = torch.Generator().manual_seed(5)
    sigmas = torch.rand(2, 6, generator=gen) * 4
    deltas = torch.rand(2, 6, generator=gen) * 0.3 + 0.05
    values = torch.rand(2, 6, 3, generator=gen)
    payload, alpha, depth, weights = composite(sigmas, deltas, values)

    # appended zero-density sample: every output unchanged
    sig2 = torch.cat([sigmas, torch.zeros(2, 1)], dim=1)
    del2 = torch.cat([deltas, torch.full((2, 1), 0.2)], dim=1)
    val2 = torch.cat([values, torch.rand(2, 1, 3, generator=gen)], dim=1)
    p2, a2, d2, w2 = composite(sig2, del2, val2)
    assert torch.allclose(p2, payload, atol=1e-7)
    assert torch.allclose(a2, alpha, atol=1e-7)
    assert torch.allclose(d2, depth, atol=1e-6)
    assert torch.allclose(w2[:, :6], weights, atol=1e-7)

    # inserted mid-ray: compositing outputs unchanged (depth excluded, the
    # insertion shifts downstream sample positions)
    k = 3
    sig3 = torch.cat([sigmas[:, :k], torch.zeros(2, 1), sigmas[:, k:]], dim=1)
    del3 = torch.cat([deltas[:, :k], torch.full((2, 1), 0.1), deltas[:, k:]], dim=1)
    val3 = torch.cat([values[:, :k], torch.rand(2, 1, 3, generator=gen), values[:, k:]], dim=1)
    p3, a3, _, w3 = composite(sig3, del3, val3)
    assert torch.allclose(p3, payload, atol=1e-7)
    assert torch.allclose(a3, alpha, atol=1e-7)
    assert torch.allclose(torch.cat([w3[:, :k], w3[:, k + 1 :]], dim=1), weights, atol=1e-7)


def test_pixel_gradient_wrt_density_matches_fd():
    gen = torch.Generator().manual_seed(13)
    sigmas = (torch.rand(3, 8, generator=gen, dtype=torch.float64) * 3).requires_grad_()
    deltas = torch.rand(3, 8, generator=gen, dtype=torch.float64) * 0.3 + 0.02
    values = torch.rand(3, 8, 2, generator=gen, dtype=torch.float64)
    payload, _, _, _ = composite(sigmas, deltas, values)
    payload[1, 0].backward()
    h = 1e-6
    worst = 0.0
    for r in range(3):
        for s in range(8):
            with torch.no_grad():
                base = sigmas[r, s].item()
                sigmas[r, s] = base + h
                up = composite(sigmas, deltas, values)[0][1, 0].item()
                sigmas[r, s] = base - h
                dn = composite(sigmas, deltas, values)[0][1, 0].item()
                sigmas[r, s] = base
            fd = (up - dn) / (2 * h)
            analytic = sigmas.grad[r, s].item()
            denom = max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, abs(fd - analytic) / denom)
    assert worst < 1e-3


# ---- render_view -----------------------------------------------------------


def test_zero_density_renders_background():
    cam = axial_camera()
    pkt = render_view(ZeroField(), cam, 0.0, samples_per_ray=16, near=0.5, far=2.0)
    assert torch.allclose(pkt.rgb, torch.ones_like(pkt.rgb), atol=1e-6)
    assert torch.equal(pkt.alpha, torch.zeros_like(pkt.alpha))
    pkt = render_view(ZeroField(), cam, 0.0, samples_per_ray=16, near=0.5, far=2.0,
                      background=(0.0, 0.3, 0.6))
    assert torch.allclose(pkt.rgb[0, 0], torch.tensor([0.0, 0.3, 0.6]), atol=1e-6)


def test_slab_alpha_matches_closed_form():
    sigma, z0, z1 = 2.0, 2.0, 2.5
    field = SlabField(sigma, z0, z1)
    cam = axial_camera(size=8, focal=40.0)  # wide enough for slanted rays
    pkt = render_view(field, cam, 0.0, samples_per_ray=256, near=1.6, far=3.0,
                      stratified=False)
    from control4d.cameras import generate_rays

    dirs = generate_rays(cam, 1.6, 3.0).directions.reshape(8, 8, 3)
    # a slanted unit-speed ray spends (z1 - z0) / d_z world units inside the slab
    expected = 1.0 - torch.exp(-sigma * (z1 - z0) / dirs[..., 2])
    rel = ((pkt.alpha - expected).abs() / expected).max().item()
    assert rel < 0.02


def test_slab_rgb_composites_albedo_over_background():
    sigma, z0, z1 = 2.0, 2.0, 2.5
    field = SlabField(sigma, z0, z1, rgb=(0.2, 0.5, 0.8))
    cam = axial_camera(size=4, focal=400.0)
    pkt = render_view(field, cam, 0.0, samples_per_ray=256, near=1.6, far=3.0,
                      stratified=False)
    a = pkt.alpha[1, 1]
    want = a * torch.tensor([0.2, 0.5, 0.8]) + (1 - a) * torch.ones(3)
    assert torch.allclose(pkt.rgb[1, 1], want, atol=1e-4)


def test_sample_count_convergence():
    field = make_field({"x": (-1.0, 1.0), "y": (-1.0, 1.0), "z": (-1.0, 1.0)})
    cam = axial_camera(size=8, focal=10.0)
    cam = CameraModel(fx=10, fy=10, cx=3.5, cy=3.5, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, 3.0]), width=8, height=8,
                      camera_id="conv")
    lo = render_view(field, cam, 0.3, samples_per_ray=64, stratified=False)
    hi = render_view(field, cam, 0.3, samples_per_ray=128, stratified=False)
    rms = (lo.rgb - hi.rgb).pow(2).mean().sqrt().item()
    assert rms < 0.01


def test_render_is_time_invariant_at_identity_warp():
    field = make_field({"x": (-1.0, 1.0), "y": (-1.0, 1.0), "z": (-1.0, 1.0)})
    cam = CameraModel(fx=10, fy=10, cx=3.5, cy=3.5, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, 3.0]), width=8, height=8,
                      camera_id="t")
    a = render_view(field, cam, 0.2, samples_per_ray=24, stratified=False)
    b = render_view(field, cam, 0.7, samples_per_ray=24, stratified=False)
    assert torch.equal(a.rgb, b.rgb)
    assert torch.equal(a.depth, b.depth)


def test_render_packet_invariants_on_random_field():
    field = make_field({"x": (-1.0, 1.0), "y": (-1.0, 1.0), "z": (-1.0, 1.0)})
    cam = CameraModel(fx=10, fy=10, cx=3.5, cy=3.5, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, 3.0]), width=8, height=8,
                      camera_id="inv")
    pkt = render_view(field, cam, 0.5, samples_per_ray=32, seed=4)
    assert (pkt.alpha >= 0).all() and (pkt.alpha <= 1 + 1e-6).all()
    assert (pkt.latent_std >= 0).all()
    for m in (pkt.rgb, pkt.latent_mean, pkt.latent_std, pkt.depth, pkt.alpha):
        assert torch.isfinite(m).all()


def test_stratified_seeding_is_deterministic():
    field = make_field({"x": (-1.0, 1.0), "y": (-1.0, 1.0), "z": (-1.0, 1.0)})
    cam = CameraModel(fx=10, fy=10, cx=3.5, cy=3.5, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, 3.0]), width=8, height=8,
                      camera_id="s")
    a = render_view(field, cam, 0.5, samples_per_ray=16, seed=9)
    b = render_view(field, cam, 0.5, samples_per_ray=16, seed=9)
    c = render_view(field, cam, 0.5, samples_per_ray=16, seed=10)
    assert torch.equal(a.rgb, b.rgb)
    assert not torch.equal(a.rgb, c.rgb)


# ---- sample_latent_map ------------------------------------------------------


def make_packet(h=6, w=5, c=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return RenderPacket(
        rgb=torch.rand(h, w, 3, generator=gen),
        latent_mean=torch.randn(h, w, c, generator=gen),
        latent_std=torch.rand(h, w, c, generator=gen) * 0.5 + 0.1,
        depth=torch.rand(h, w, generator=gen),
        alpha=torch.rand(h, w, generator=gen),
        t=0.0, camera_id="cam00", seed=0,
    )


def test_latent_zero_std_is_exact():
    pkt = make_packet()
    pkt.latent_std = torch.zeros_like(pkt.latent_std)
    out = sample_latent_map(pkt, seed=123)
    assert torch.equal(out, pkt.latent_mean)


def test_latent_seeded_repeatable():
    pkt = make_packet()
    a = sample_latent_map(pkt, seed=7)
    b = sample_latent_map(pkt, seed=7)
    c = sample_latent_map(pkt, seed=8)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_latent_scalar_draw_is_shared_across_pixels():
    pkt = make_packet()
    out = sample_latent_map(pkt, seed=3)
    tval = (out - pkt.latent_mean) / pkt.latent_std
    assert torch.allclose(tval, tval.flatten()[0].expand_as(tval), atol=1e-5)


def test_latent_per_pixel_draws_differ():
    pkt = make_packet()
    out = sample_latent_map(pkt, seed=3, per_pixel=True)
    tval = (out - pkt.latent_mean) / pkt.latent_std
    # one draw per pixel, shared across channels
    assert torch.allclose(tval[..., 0], tval[..., 1], atol=1e-5)
    assert tval[..., 0].std() > 0.1


def test_latent_monte_carlo_statistics():
    pkt = make_packet(h=4, w=4, c=2, seed=1)
    n = 10_000
    draws = torch.stack([sample_latent_map(pkt, seed=i) for i in range(n)])
    mean = draws.mean(dim=0)
    std = draws.std(dim=0)
    se = pkt.latent_std / math.sqrt(n)
    assert ((mean - pkt.latent_mean).abs() <= 3 * se).all()
    assert ((std - pkt.latent_std).abs() / pkt.latent_std <= 0.03).all()


def test_latent_negative_std_rejected():
    pkt = make_packet()
    pkt.latent_std = pkt.latent_std - 1.0
    with pytest.raises(ValidationError):
        sample_latent_map(pkt, seed=0)


def test_save_packet_writes_files(tmp_path):
    pkt = make_packet()
    save_packet(pkt, tmp_path, "v00")
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["v00.png", "v00_alpha.png", "v00_depth.npy",
                     "v00_latent_mean.npy", "v00_latent_std.npy"]
    arr = np.load(tmp_path / "v00_latent_mean.npy")
    assert arr.shape == (6, 5, 3)
