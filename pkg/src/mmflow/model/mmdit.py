"""A miniature dual-stream MMDiT operating on packed mixed-resolution batches."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, NumericFailure
from .embeddings import size_embedding, timestep_embedding
from .packing import PackedBatch, TextSequence, TokenGrid, patchify, unpatchify
from .positions import apply_rope, rope_angles


@dataclass
class ModelConfig:
    depth: int = 6
    hidden: int = 256
    heads: int = 4
    patch_size: int = 2
    rope_base: float = 10000.0
    tap_layer: int | None = None
    latent_channels: int = 12
    text_dim: int = 64
    vocab_size: int = 128
    freq_dim: int = 256
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.tap_layer is None:
            self.tap_layer = self.depth // 2
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.hidden % (2 * self.heads):
            raise ConfigError(f"hidden={self.hidden} not divisible by 2*heads={2 * self.heads}")
        if self.head_dim % 4:
            raise ConfigError(f"head dim {self.head_dim} must be divisible by 4 for 2D RoPE")
        if not 0 <= self.tap_layer < self.depth:
            raise ConfigError(f"tap_layer={self.tap_layer} must lie in [0, {self.depth})")
        if self.freq_dim % 2:
            raise ConfigError("freq_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def token_dim(self) -> int:
        return self.patch_size**2 * self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)


class CharTokenizer:
    """Character-level ids; 0 is reserved, ids past the vocab collapse to 1."""

    def __init__(self, vocab_size: int = 128):
        self.vocab_size = vocab_size

    def encode(self, text: str) -> torch.Tensor:
        ids = [o if 2 <= o < self.vocab_size else 1 for o in map(ord, text)]
        return torch.tensor(ids, dtype=torch.long)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tokenizer = CharTokenizer(cfg.vocab_size)
        self.table = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        nn.init.normal_(self.table.weight, std=0.02)

    def forward(self, caption: str) -> TextSequence:
        return TextSequence(self.table(self.tokenizer.encode(caption)))


def image_to_latent(image: torch.Tensor) -> torch.Tensor:
    """Fixed orthogonal pixel-unshuffle (factor 2) standing in for a VAE encoder."""
    return patchify(image, 2)


def latent_to_image(latent: torch.Tensor) -> torch.Tensor:
    return unpatchify(latent, 2)


def image_token_grid(image: torch.Tensor, cfg: ModelConfig) -> TokenGrid:
    h, w, _ = image.shape
    return TokenGrid(patchify(image_to_latent(image), cfg.patch_size), (h, w))


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class StreamWeights(nn.Module):
    """Per-modality weights of one joint block."""

    def __init__(self, d: int, mlp_ratio: float):
        super().__init__()
        hidden = int(d * mlp_ratio)
        self.ada = nn.Linear(d, 6 * d)
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def mlp(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class JointBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.img = StreamWeights(cfg.hidden, cfg.mlp_ratio)
        self.txt = StreamWeights(cfg.hidden, cfg.mlp_ratio)

    def forward(self, x_img, x_txt, c, ctx):
        H, dh = self.cfg.heads, self.cfg.head_dim
        m_img = self.img.ada(F.silu(c))[ctx["img_sid"]].chunk(6, dim=-1)
        m_txt = self.txt.ada(F.silu(c))[ctx["txt_sid"]].chunk(6, dim=-1)

        qkv_img = self.img.qkv(modulate(self.img.norm1(x_img), m_img[0], m_img[1]))
        qkv_txt = self.txt.qkv(modulate(self.txt.norm1(x_txt), m_txt[0], m_txt[1]))
        qkv = torch.cat([qkv_img, qkv_txt])[ctx["perm"]].reshape(-1, 3, H, dh)
        q = apply_rope(qkv[:, 0], ctx["cos"], ctx["sin"])
        k = apply_rope(qkv[:, 1], ctx["cos"], ctx["sin"])
        v = qkv[:, 2]
        o = joint_attention(q, k, v, ctx["offsets"], ctx["modality_masks"]).reshape(-1, H * dh)
        o_img, o_txt = o[ctx["img_idx"]], o[ctx["txt_idx"]]

        x_img = x_img + m_img[2] * self.img.proj(o_img)
        x_img = x_img + m_img[5] * self.img.mlp(modulate(self.img.norm2(x_img), m_img[3], m_img[4]))
        x_txt = x_txt + m_txt[2] * self.txt.proj(o_txt)
        x_txt = x_txt + m_txt[5] * self.txt.mlp(modulate(self.txt.norm2(x_txt), m_txt[3], m_txt[4]))
        return x_img, x_txt


def joint_attention(q, k, v, offsets, modality_masks=None):
    """Block-diagonal attention: each sample attends only to its own tokens.

    q, k, v: (N, heads, d_head). ``modality_masks`` optionally holds one boolean
    (L, L) mask per sample restricting attention further.
    """
    scale = q.shape[-1] ** -0.5
    outs = []
    for i in range(len(offsets) - 1):
        a, b = int(offsets[i]), int(offsets[i + 1])
        qs, ks, vs = (z[a:b].transpose(0, 1) for z in (q, k, v))
        scores = qs @ ks.transpose(-1, -2) * scale
        if modality_masks is not None:
            scores = scores.masked_fill(~modality_masks[i], float("-inf"))
        outs.append((scores.softmax(-1) @ vs).transpose(0, 1))
    return torch.cat(outs)


class MMDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.img_in = nn.Linear(cfg.token_dim, d)
        self.txt_in = nn.Linear(cfg.text_dim, d)
        self.cond_mlp = nn.Sequential(nn.Linear(cfg.freq_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(JointBlock(cfg) for _ in range(cfg.depth))
        self.final_ada = nn.Linear(d, 2 * d)
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_proj = nn.Linear(d, cfg.token_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.cond_mlp[0].weight, std=0.02)
        nn.init.normal_(self.cond_mlp[2].weight, std=0.02)
        # adaLN-zero: every residual branch and the output start switched off
        for blk in self.blocks:
            for s in (blk.img, blk.txt):
                nn.init.zeros_(s.ada.weight)
                nn.init.zeros_(s.ada.bias)
        for m in (self.final_ada, self.final_proj):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def condition(self, batch: PackedBatch) -> torch.Tensor:
        dtype = self.img_in.weight.dtype
        t_emb = timestep_embedding(batch.t.to(dtype), self.cfg.freq_dim)
        s_emb = torch.stack([size_embedding(s, self.cfg.freq_dim, dtype) for s in batch.sizes])
        return self.cond_mlp(t_emb + s_emb)

    def _context(self, batch: PackedBatch, cross_modal: bool):
        is_text = batch.is_text
        img_idx = np.flatnonzero(~is_text)
        txt_idx = np.flatnonzero(is_text)
        perm = np.empty(len(is_text), dtype=np.int64)
        perm[img_idx] = np.arange(len(img_idx))
        perm[txt_idx] = len(img_idx) + np.arange(len(txt_idx))
        sid = batch.sample_index()
        cos, sin = rope_angles(batch.positions, self.cfg.head_dim, self.cfg.rope_base,
                               dtype=self.img_in.weight.dtype)
        masks = None
        if not cross_modal:
            masks = []
            for i in range(batch.num_samples):
                tags = torch.as_tensor(is_text[batch.offsets[i]:batch.offsets[i + 1]])
                masks.append(tags[:, None] == tags[None, :])
        return {
            "img_idx": torch.as_tensor(img_idx),
            "txt_idx": torch.as_tensor(txt_idx),
            "perm": torch.as_tensor(perm),
            "img_sid": torch.as_tensor(sid[img_idx]),
            "txt_sid": torch.as_tensor(sid[txt_idx]),
            "cos": cos,
            "sin": sin,
            "offsets": batch.offsets,
            "modality_masks": masks,
        }

    def forward(self, batch: PackedBatch, cross_modal: bool = True):
        """Return (velocity per image token, tap features per image token)."""
        ctx = self._context(batch, cross_modal)
        dtype = self.img_in.weight.dtype
        c = self.condition(batch)
        x_img = self.img_in(batch.image_tokens.to(dtype))
        x_txt = self.txt_in(batch.text_tokens.to(dtype))
        tap = None
        for i, blk in enumerate(self.blocks):
            x_img, x_txt = blk(x_img, x_txt, c, ctx)
            if not (torch.isfinite(x_img).all() and torch.isfinite(x_txt).all()):
                raise NumericFailure("non-finite activations", where=f"layer {i}")
            if i == self.cfg.tap_layer:
                tap = x_img
        shift, scale = self.final_ada(F.silu(c))[ctx["img_sid"]].chunk(2, dim=-1)
        v = self.final_proj(modulate(self.final_norm(x_img), shift, scale))
        return v, tap
