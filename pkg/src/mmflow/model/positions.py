"""2D position ids shared by image and text tokens, and the rotary embedding over them.

Image tokens at grid cell (r, c) get ids (r, c). Text tokens are laid out as a
single row ``[1, L]`` whose column ids continue where the image grid stops, so
text token ``i`` sits at (0, C + i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError


@dataclass(frozen=True)
class PositionTable:
    row_ids: np.ndarray  # (N,) int64
    col_ids: np.ndarray  # (N,) int64
    is_text: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.row_ids)

    def as_array(self) -> np.ndarray:
        """(N, 2) array of (row, col) ids."""
        return np.stack([self.row_ids, self.col_ids], axis=-1)

    def image_ids(self) -> list[tuple[int, int]]:
        m = ~self.is_text
        return list(zip(self.row_ids[m].tolist(), self.col_ids[m].tolist()))

    def text_ids(self) -> list[tuple[int, int]]:
        m = self.is_text
        return list(zip(self.row_ids[m].tolist(), self.col_ids[m].tolist()))

    @staticmethod
    def concat(tables: list["PositionTable"]) -> "PositionTable":
        return PositionTable(
            np.concatenate([t.row_ids for t in tables]),
            np.concatenate([t.col_ids for t in tables]),
            np.concatenate([t.is_text for t in tables]),
        )


def assign_position_ids(grid_rows: int, grid_cols: int, text_len: int) -> PositionTable:
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError(f"grid dims must be positive, got ({grid_rows}, {grid_cols})")
    if text_len < 0:
        raise ValueError(f"text_len must be non-negative, got {text_len}")
    rr, cc = np.meshgrid(np.arange(grid_rows), np.arange(grid_cols), indexing="ij")
    rows = np.concatenate([rr.ravel(), np.zeros(text_len, dtype=np.int64)])
    cols = np.concatenate([cc.ravel(), grid_cols + np.arange(text_len)])
    is_text = np.concatenate([np.zeros(grid_rows * grid_cols, bool), np.ones(text_len, bool)])
    return PositionTable(rows.astype(np.int64), cols.astype(np.int64), is_text)


def rope_frequencies(d_head: int, base_freq: float = 10000.0, dtype=torch.float64) -> torch.Tensor:
    """Per-pair angular frequencies for one axis (d_head // 4 of them)."""
    if d_head % 4:
        raise ConfigError(f"d_head={d_head} must be divisible by 4 for 2D RoPE")
    n_pairs = d_head // 4
    return base_freq ** (-torch.arange(n_pairs, dtype=dtype) / n_pairs)


def rope_angles(positions, d_head: int, base_freq: float = 10000.0, dtype=torch.float32):
    """Return (cos, sin) of shape (N, d_head // 2) for row-half then col-half pairs."""
    if isinstance(positions, PositionTable):
        positions = positions.as_array()
    pos = torch.as_tensor(np.asarray(positions), dtype=torch.float64)
    freqs = rope_frequencies(d_head, base_freq)
    ang = torch.cat([pos[:, :1] * freqs, pos[:, 1:2] * freqs], dim=-1)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent channel pairs of ``x`` (N, heads, d_head) by precomputed angles."""
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return out.flatten(-2)


def rope_rotate(features: torch.Tensor, positions, base_freq: float = 10000.0) -> torch.Tensor:
    """Apply 2D RoPE: first half of each head by row ids, second half by column ids."""
    if features.ndim != 3:
        raise ValueError(f"expected (N, heads, d_head), got shape {tuple(features.shape)}")
    cos, sin = rope_angles(positions, features.shape[-1], base_freq, dtype=features.dtype)
    return apply_rope(features, cos, sin)
