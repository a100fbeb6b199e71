"""Mixed-resolution sequence packing.

Samples of different grid sizes and caption lengths are concatenated into one
token stream. Each sample contributes its image tokens (row-major) followed by
its text tokens; attention never crosses sample boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .positions import PositionTable, assign_position_ids


@dataclass
class TokenGrid:
    latent_patches: torch.Tensor  # (R, C, d_in)
    source_resolution: tuple[int, int]

    def __post_init__(self):
        if self.latent_patches.ndim != 3:
            raise ValueError("latent_patches must be (rows, cols, channels)")
        r, c, _ = self.latent_patches.shape
        if r < 1 or c < 1:
            raise ValueError("token grid must be non-empty")
        if min(self.source_resolution) <= 0:
            raise ValueError("source_resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.latent_patches.shape[:2])

    def __len__(self) -> int:
        r, c = self.shape
        return r * c


@dataclass
class TextSequence:
    token_embeddings: torch.Tensor  # (L, d_txt)

    def __len__(self) -> int:
        return self.token_embeddings.shape[0]


@dataclass(frozen=True)
class SizeCondition:
    target_height: int
    target_width: int

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ValueError("size condition must be positive")


@dataclass
class PackedBatch:
    image_tokens: torch.Tensor  # (N_img, d_in), all samples concatenated
    text_tokens: torch.Tensor  # (N_txt, d_txt)
    offsets: np.ndarray  # (n + 1,) boundaries in the joint stream
    is_text: np.ndarray  # (N,) modality tag per joint token
    positions: PositionTable
    grid_shapes: list[tuple[int, int]]
    text_lengths: list[int]
    sizes: list[SizeCondition]
    t: torch.Tensor  # (n,)
    image_offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = [r * c for r, c in self.grid_shapes]
        self.image_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def num_samples(self) -> int:
        return len(self.grid_shapes)

    @property
    def num_tokens(self) -> int:
        return int(self.offsets[-1])

    def sample_index(self) -> np.ndarray:
        """Sample id of every joint token."""
        return np.repeat(np.arange(self.num_samples), np.diff(self.offsets))

    def attention_mask(self, cross_modal: bool = True) -> np.ndarray:
        """Boolean (N, N) mask; True where attention is allowed."""
        sid = self.sample_index()
        mask = sid[:, None] == sid[None, :]
        if not cross_modal:
            mask &= self.is_text[:, None] == self.is_text[None, :]
        return mask

    def split_images(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        """Split per-image-token outputs back into per-sample (R, C, ...) grids."""
        out = []
        for i, (r, c) in enumerate(self.grid_shapes):
            a, b = self.image_offsets[i], self.image_offsets[i + 1]
            out.append(tokens[a:b].reshape(r, c, *tokens.shape[1:]))
        return out


def pack_samples(samples) -> PackedBatch:
    """Pack ``(TokenGrid, TextSequence, SizeCondition, t)`` tuples into one batch."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot pack an empty sample list")
    grids, texts, sizes, ts = zip(*samples)
    tables, lengths, tags = [], [], []
    for g, txt in zip(grids, texts):
        r, c = g.shape
        table = assign_position_ids(r, c, len(txt))
        tables.append(table)
        lengths.append(len(table))
        tags.append(table.is_text)
    image_tokens = torch.cat([g.latent_patches.reshape(len(g), -1) for g in grids])
    text_tokens = torch.cat([txt.token_embeddings for txt in texts])
    t = torch.stack([torch.as_tensor(v, dtype=image_tokens.dtype).reshape(()) for v in ts])
    return PackedBatch(
        image_tokens=image_tokens,
        text_tokens=text_tokens,
        offsets=np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        is_text=np.concatenate(tags),
        positions=PositionTable.concat(tables),
        grid_shapes=[g.shape for g in grids],
        text_lengths=[len(txt) for txt in texts],
        sizes=list(sizes),
        t=t,
    )


def patchify(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """(H, W, ch) -> (H/p, W/p, p*p*ch)."""
    h, w, ch = latent.shape
    if h % patch or w % patch:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {patch}")
    x = latent.reshape(h // patch, patch, w // patch, patch, ch).permute(0, 2, 1, 3, 4)
    return x.reshape(h // patch, w // patch, patch * patch * ch)


def unpatchify(tokens: torch.Tensor, patch: int) -> torch.Tensor:
    r, c, d = tokens.shape
    ch = d // (patch * patch)
    x = tokens.reshape(r, c, patch, patch, ch).permute(0, 2, 1, 3, 4)
    return x.reshape(r * patch, c * patch, ch)
