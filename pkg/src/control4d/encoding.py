"""Sinusoidal positional encoding for field inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from control4d.errors import ValidationError


@dataclass(frozen=True)
class PositionalEncoding:
    """Fourier-feature encoding at frequencies 2^k * pi, k = 0..num_frequencies-1.

    Output layout per frequency is [sin, cos], optionally prefixed by the raw
    input, so the output dimension is input_dim * (2 * num_frequencies + 1)
    with include_input and input_dim * 2 * num_frequencies without.
    """

    num_frequencies: int
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))

    def __call__(self, p: torch.Tensor) -> torch.Tensor:
        """Encode a [..., D] coordinate tensor to [..., output_dim(D)]."""
        if not torch.isfinite(p).all():
            raise ValidationError("positional encoding input must be finite")
        parts = [p] if self.include_input else []
        for k in range(self.num_frequencies):
            scaled = p * (2.0**k * math.pi)
            parts.append(torch.sin(scaled))
            parts.append(torch.cos(scaled))
        return torch.cat(parts, dim=-1)
