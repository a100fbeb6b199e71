"""Sinusoidal conditioning embeddings for timestep and target size."""

from __future__ import annotations

import math

import torch

from ..errors import ConfigError
from .packing import SizeCondition


def sinusoidal(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard [cos | sin] embedding of scalars, shape (..., dim)."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    # scale to [0, 1000] so low frequencies still resolve small changes in t
    return sinusoidal(t * 1000.0, dim).to(t.dtype)


def size_embedding(cond: SizeCondition, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Height occupies the first dim/2 channels, width the second."""
    if dim % 2:
        raise ConfigError(f"size embedding dim must be even, got {dim}")
    half = dim // 2
    width = half + half % 2
    h = sinusoidal(torch.tensor(float(cond.target_height)), width)[:half]
    w = sinusoidal(torch.tensor(float(cond.target_width)), width)[:half]
    return torch.cat([h, w]).to(dtype)
