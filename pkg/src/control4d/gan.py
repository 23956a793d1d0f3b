"""Editor-distillation GAN: super-resolving generator, critic, encoders, losses.

All images here are [B, 3, H, W] floats in [0, 1]. The generator consumes the
low-resolution render concatenated with a latent map, a global conditioning
code injected by per-channel scale/shift at every stage, and (level 3 only)
local encoder features that replace the latent map and join mid-stages.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from control4d.errors import ValidationError
from control4d.utils import seeded_generator

GP_WEIGHT = 10.0
PERCEPTUAL_WEIGHT = 1.0
L1_WEIGHT = 10.0


def _init_conv(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()


class Film(nn.Module):
    """Per-channel scale/shift from a global code; identity at init."""

    def __init__(self, code_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(code_dim, 2 * channels)

    def forward(self, h: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(code).chunk(2, dim=1)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


class _GenStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, code_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.film1 = Film(code_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.film2 = Film(code_dim, out_ch)

    def forward(self, h: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.film1(self.conv1(h), code), 0.2)
        return F.leaky_relu(self.film2(self.conv2(h), code), 0.2)


class Generator(nn.Module):
    """Image-to-image upsampler: low-res render + latent map -> high-res RGB.

    `mid_channels` extra channels are concatenated after the first upsample
    when local features are given; zeros stand in otherwise, so the conv
    shapes are independent of the generation level.
    """

    def __init__(
        self,
        latent_channels: int,
        upsample_factor: int = 4,
        base_channels: int = 32,
        code_dim: int = 64,
        mid_channels: int = 16,
    ):
        super().__init__()
        if upsample_factor < 2 or upsample_factor & (upsample_factor - 1):
            raise ValidationError("upsample_factor must be a power of two >= 2")
        self.upsample_factor = upsample_factor
        self.mid_channels = mid_channels
        n_up = int(math.log2(upsample_factor))
        chans = [base_channels]
        for _ in range(n_up):
            chans.append(max(24, chans[-1] * 2 // 3))
        self.stem = _GenStage(3 + latent_channels, chans[0], code_dim)
        stages = []
        for i in range(n_up):
            extra = mid_channels if i == 0 else 0
            stages.append(_GenStage(chans[i] + extra, chans[i + 1], code_dim))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(
        self,
        render: torch.Tensor,
        latent_map: torch.Tensor,
        code: torch.Tensor,
        mid_features: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.stem(torch.cat([render, latent_map], dim=1), code)
        for i, stage in enumerate(self.stages):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if i == 0:
                if mid_features is None:
                    b, _, hh, ww = h.shape
                    mid_features = h.new_zeros(b, self.mid_channels, hh, ww)
                h = torch.cat([h, mid_features], dim=1)
            h = stage(h, code)
        return torch.sigmoid(self.head(h))


class Discriminator(nn.Module):
    """Convolutional critic: image -> unbounded scalar score per batch item."""

    def __init__(self, base_channels: int = 24):
        super().__init__()
        c = base_channels
        self.convs = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, c * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c * 2, c * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c * 2, c * 2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.score = nn.Linear(c * 2, 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = self.convs(image)
        return self.score(h.mean(dim=(2, 3))).squeeze(1)


class GlobalEncoder(nn.Module):
    """Image of any resolution -> one global code vector."""

    def __init__(self, code_dim: int = 64):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 48, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.proj = nn.Linear(48, code_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = self.convs(image).mean(dim=(2, 3))
        return self.proj(h)


class LocalEncoder(nn.Module):
    """High-res image -> feature maps at the generator's injection scales.

    Returns (latent_slot [B, C_l, H, W] at the render resolution, mid
    [B, mid_channels, 2H, 2W]). Built per upsample factor so a stack of
    stride-2 convs lands exactly on those scales.
    """

    def __init__(self, latent_channels: int, upsample_factor: int, mid_channels: int = 16):
        super().__init__()
        n_up = int(math.log2(upsample_factor))
        pre = []
        ch = 3
        for _ in range(n_up - 1):  # output res down to 2H
            pre.append(nn.Conv2d(ch, 16, 3, stride=2, padding=1))
            pre.append(nn.LeakyReLU(0.2))
            ch = 16
        self.pre = nn.Sequential(*pre)
        self.to_mid = nn.Conv2d(ch, mid_channels, 3, padding=1)
        self.to_latent = nn.Conv2d(mid_channels, latent_channels, 3, stride=2, padding=1)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mid = F.leaky_relu(self.to_mid(self.pre(image)), 0.2)
        return self.to_latent(mid), mid


class FrozenFeatureNet(nn.Module):
    """Fixed convolutional feature extractor behind the perceptual loss.

    Weights come from a pinned asset ($CONTROL4D_CACHE/perceptual.pt) when
    available and from a seeded init otherwise; either way the module is
    frozen and the loss below is a plain multi-layer MSE.
    """

    ASSET_NAME = "perceptual.pt"

    def __init__(self, seed: int = 7):
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, stride=1, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            ]
        )
        _init_conv(self, seeded_generator(seed, "perceptual"))
        cache = os.environ.get("CONTROL4D_CACHE")
        if cache:
            asset = Path(cache) / self.ASSET_NAME
            if asset.is_file():
                self.load_state_dict(torch.load(asset, map_location="cpu", weights_only=True))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h = image * 2.0 - 1.0
        feats = []
        for block in self.blocks:
            h = F.leaky_relu(block(h), 0.2)
            feats.append(h)
        return feats


def perceptual_loss(net: FrozenFeatureNet, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between frozen multi-layer activations."""
    fx, fy = net(x), net(y)
    terms = [F.mse_loss(a, b) for a, b in zip(fx, fy)]
    return torch.stack(terms).mean()


def gradient_penalty(
    disc: nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    weight: float = GP_WEIGHT,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """WGAN-GP term: weight * mean((||grad_xhat D(xhat)|| - 1)^2)."""
    if real.shape != fake.shape:
        raise ValidationError("gradient_penalty: real/fake shapes differ")
    b = real.shape[0]
    u = torch.rand(b, 1, 1, 1, generator=generator, dtype=real.dtype)
    mixed = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    score = disc(mixed).sum()
    (grad,) = torch.autograd.grad(score, mixed, create_graph=True)
    norm = grad.reshape(b, -1).norm(dim=1)
    return weight * ((norm - 1.0) ** 2).mean()


def disc_loss(
    disc: nn.Module,
    fake: torch.Tensor,
    real: torch.Tensor,
    gp_weight: float = GP_WEIGHT,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Critic loss D(fake) - D(real) + gradient penalty; fake is detached."""
    fake = fake.detach()
    wass = disc(fake).mean() - disc(real).mean()
    return wass + gradient_penalty(disc, real, fake, gp_weight, generator)


def gen_loss(
    disc: nn.Module,
    perceptual: FrozenFeatureNet,
    level: int,
    fake: torch.Tensor,
    edited: torch.Tensor | None = None,
    perceptual_weight: float = PERCEPTUAL_WEIGHT,
    l1_weight: float = L1_WEIGHT,
) -> torch.Tensor:
    """Level-dependent generator loss: adversarial, + perceptual, + L1."""
    if level not in (1, 2, 3):
        raise ValidationError(f"unknown generation level {level}")
    if level >= 2 and edited is None:
        raise ValidationError(f"level {level} generator loss needs an edited image")
    loss = -disc(fake).mean()
    if level >= 2:
        loss = loss + perceptual_weight * perceptual_loss(perceptual, fake, edited)
    if level == 3:
        loss = loss + l1_weight * (fake - edited).abs().mean()
    return loss


@dataclass(frozen=True)
class LevelSchedule:
    """Per-step probabilities of training generation level 1/2/3."""

    p1: float = 1.0 / 3.0
    p2: float = 1.0 / 3.0
    p3: float = 1.0 / 3.0

    def __post_init__(self):
        probs = (self.p1, self.p2, self.p3)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValidationError(f"level probabilities must be >= 0 and sum to 1, got {probs}")

    def sample(self, generator: torch.Generator) -> int:
        u = torch.rand((), generator=generator).item()
        if u < self.p1:
            return 1
        if u < self.p1 + self.p2:
            return 2
        return 3


class MultiLevelGan(nn.Module):
    """Generator, critic, and encoders wired into the three-level scheme.

    Level 1 conditions on the low-res render itself, level 2 on the edited
    image's global code, level 3 additionally swaps the latent map for
    local encoder features of the edited image.
    """

    def __init__(
        self,
        latent_channels: int = 16,
        upsample_factor: int = 4,
        base_channels: int = 32,
        code_dim: int = 64,
        mid_channels: int = 16,
        seed: int = 0,
        perceptual_seed: int = 7,
    ):
        super().__init__()
        self.upsample_factor = upsample_factor
        self.generator = Generator(
            latent_channels, upsample_factor, base_channels, code_dim, mid_channels
        )
        self.discriminator = Discriminator()
        self.global_encoder = GlobalEncoder(code_dim)
        self.local_encoder = LocalEncoder(latent_channels, upsample_factor, mid_channels)
        self.perceptual = FrozenFeatureNet(perceptual_seed)
        gen = seeded_generator(seed, "gan-init")
        for module in (self.generator, self.discriminator, self.global_encoder, self.local_encoder):
            _init_conv(module, gen)

    def generate(
        self,
        level: int,
        render: torch.Tensor,
        latent_map: torch.Tensor,
        edited: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if level == 1:
            return self.generator(render, latent_map, self.global_encoder(render))
        if level in (2, 3):
            if edited is None:
                raise ValidationError(f"level {level} generation needs an edited image")
            code = self.global_encoder(edited)
            if level == 2:
                return self.generator(render, latent_map, code)
            latent_slot, mid = self.local_encoder(edited)
            return self.generator(render, latent_slot, code, mid_features=mid)
        raise ValidationError(f"unknown generation level {level}")

    def generator_parameters(self):
        mods = (self.generator, self.global_encoder, self.local_encoder)
        return [p for m in mods for p in m.parameters()]
