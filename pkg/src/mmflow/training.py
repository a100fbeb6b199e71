"""Flow-matching objective with defect masking and representation alignment.

The loss for one sample is

    || v(x_t, t; caption) - (eps - x0) ||^2   over non-defect positions
    + lambda * mean_tokens(1 - cos(project(tap), encoder(x0)))

with x_t = (1 - t) x0 + t eps.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateMaskError, NumericFailure
from .model.checkpoint import arrays_to_state, load_checkpoint, save_checkpoint, state_to_arrays
from .model.mmdit import MMDiT, ModelConfig, TextEncoder
from .model.packing import SizeCondition, TokenGrid, pack_samples

REPA_WEIGHT = 0.5
DEFECT_THRESHOLD = 0.20
COS_EPS = 1e-8


@dataclass
class InterpolantState:
    x0: torch.Tensor
    eps: torch.Tensor
    t: float
    xt: torch.Tensor
    v_target: torch.Tensor


def make_interpolant(x0: torch.Tensor, eps: torch.Tensor, t) -> InterpolantState:
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        xt = x0.clone()
    elif t == 1.0:
        xt = eps.clone()
    else:
        xt = (1.0 - t) * x0 + t * eps
    return InterpolantState(x0, eps, t, xt, eps - x0)


@dataclass
class DefectMask:
    keep: np.ndarray  # (R, C) bool, True = clean
    area_fraction_defect: float = field(init=False)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        # count defects directly: 1 - mean(keep) rounds 20/100 to just below 0.2
        self.area_fraction_defect = float(np.count_nonzero(~self.keep) / self.keep.size)

    @classmethod
    def all_keep(cls, shape) -> "DefectMask":
        return cls(np.ones(shape, dtype=bool))


def defect_gate(mask, threshold: float = DEFECT_THRESHOLD) -> bool:
    """Keep a sample iff its defect area is strictly below ``threshold``."""
    area = mask.area_fraction_defect if isinstance(mask, DefectMask) else float(mask)
    return area < threshold


def flow_loss(v_pred: torch.Tensor, v_target: torch.Tensor, mask: DefectMask | None = None):
    """Mean squared velocity error over kept grid positions.

    ``v_pred``/``v_target`` are (R, C, D) or (R*C, D); masked positions contribute
    neither value nor gradient.
    """
    if v_pred.shape != v_target.shape:
        raise ValueError("v_pred and v_target shapes differ")
    diff = (v_pred - v_target).reshape(-1, v_pred.shape[-1])
    if mask is None:
        return diff.pow(2).mean()
    keep = torch.as_tensor(mask.keep.reshape(-1))
    if keep.numel() != diff.shape[0]:
        raise ValueError(f"mask covers {keep.numel()} positions, prediction has {diff.shape[0]}")
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DegenerateMaskError("every position is masked; drop the sample instead")
    diff = torch.where(keep[:, None], diff, torch.zeros((), dtype=diff.dtype))
    return diff.pow(2).sum() / (n_keep * diff.shape[1])


def repa_loss(tap_features: torch.Tensor, encoder_features: torch.Tensor, projector=None):
    """Mean cosine distance between projected model features and encoder features."""
    z = tap_features if projector is None else (
        projector(tap_features) if callable(projector) else tap_features @ projector)
    if z.shape[0] != encoder_features.shape[0]:
        raise ValueError("token counts of tap and encoder features differ")
    dot = (z * encoder_features).sum(-1)
    nz = z.norm(dim=-1).clamp_min(COS_EPS)
    ne = encoder_features.norm(dim=-1).clamp_min(COS_EPS)
    cos = (dot / (nz * ne)).clamp(-1.0, 1.0)
    return (1.0 - cos).mean()


@dataclass
class LossBreakdown:
    flow_loss: float
    repa_loss: float
    total: float
    weight: float

    def as_floats(self) -> "LossBreakdown":
        def f(x):
            return x.item() if torch.is_tensor(x) else float(x)

        return LossBreakdown(f(self.flow_loss), f(self.repa_loss), f(self.total), f(self.weight))


def total_loss(flow, repa, weight: float = REPA_WEIGHT) -> LossBreakdown:
    return LossBreakdown(flow, repa, flow + weight * repa, weight)


class PatchEncoder(nn.Module):
    """Frozen, randomly initialised per-token encoder used as the alignment target."""

    def __init__(self, token_dim: int, out_dim: int = 64, hidden: int = 128, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(token_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen) / lin.in_features**0.5)
                lin.bias.zero_()
        self.requires_grad_(False)
        self.out_dim = out_dim

    def forward(self, tokens):
        return self.fc2(F.gelu(self.fc1(tokens)))


@dataclass
class TrainExample:
    x0: TokenGrid
    caption: str
    size: SizeCondition
    t: float
    eps: torch.Tensor  # same shape as x0.latent_patches
    mask: DefectMask | None = None


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0


class FlowModel(nn.Module):
    """Trainable pieces bundled together: MMDiT, text embedding table, REPA projector."""

    def __init__(self, cfg: ModelConfig, encoder_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.mmdit = MMDiT(cfg)
        self.text = TextEncoder(cfg)
        self.projector = nn.Linear(cfg.hidden, encoder_dim)

    def pack(self, examples, use_xt=True):
        samples, states = [], []
        for ex in examples:
            st = make_interpolant(ex.x0.latent_patches, ex.eps, ex.t)
            states.append(st)
            grid = TokenGrid(st.xt if use_xt else st.x0, ex.x0.source_resolution)
            samples.append((grid, self.text(ex.caption), ex.size, ex.t))
        return pack_samples(samples), states

    def velocity(self, xt_grids, captions, sizes, t):
        """Velocity for a list of (R, C, D) states sharing timestep ``t``."""
        samples = [
            (TokenGrid(x, (s.target_height, s.target_width)), self.text(c), s, t)
            for x, c, s in zip(xt_grids, captions, sizes)
        ]
        batch = pack_samples(samples)
        v, _ = self.mmdit(batch)
        return batch.split_images(v)


def compute_losses(model: FlowModel, encoder: nn.Module, examples, weight: float = REPA_WEIGHT):
    """Per-sample-averaged objective over a list of TrainExamples; returns tensors."""
    batch, states = model.pack(examples)
    v, tap = model.mmdit(batch)
    v_per = batch.split_images(v)
    tap_per = batch.split_images(tap)
    flows, repas = [], []
    for ex, st, vp, tp in zip(examples, states, v_per, tap_per):
        flows.append(flow_loss(vp, st.v_target.to(vp.dtype), ex.mask))
        if weight != 0.0:
            r, c, d_in = st.x0.shape
            with torch.no_grad():
                target = encoder(st.x0.reshape(r * c, d_in).to(vp.dtype))
            repas.append(repa_loss(tp.reshape(r * c, -1), target, model.projector))
    flow = torch.stack(flows).mean()
    repa = torch.stack(repas).mean() if repas else torch.zeros((), dtype=flow.dtype)
    return total_loss(flow, repa, weight)


class Trainer:
    """Single-writer optimisation loop around ``compute_losses``."""

    def __init__(self, cfg: ModelConfig, optim: OptimConfig | None = None,
                 repa_weight: float = REPA_WEIGHT, encoder_dim: int = 64, seed: int = 0):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.optim_cfg = optim or OptimConfig()
        self.repa_weight = repa_weight
        self.model = FlowModel(cfg, encoder_dim)
        self.encoder = PatchEncoder(cfg.token_dim, encoder_dim)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=self.optim_cfg.lr,
            betas=self.optim_cfg.betas,
            weight_decay=self.optim_cfg.weight_decay,
        )
        self.step = 0

    def train_step(self, examples) -> LossBreakdown:
        self.model.train()
        losses = compute_losses(self.model, self.encoder, examples, self.repa_weight)
        if not torch.isfinite(losses.total):
            diag = [(tuple(ex.x0.shape), round(float(ex.t), 4)) for ex in examples]
            raise NumericFailure(f"non-finite loss {float(losses.total)}; samples (grid, t): {diag}",
                                 where=f"step {self.step}")
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), self.optim_cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        return losses.as_floats()

    # checkpointing

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = state_to_arrays("model", self.model.state_dict())
        params = list(self.model.parameters())
        for i, p in enumerate(params):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            arrays[f"opt.{i}.step"] = np.asarray(float(st["step"]), dtype=np.float32)
            arrays[f"opt.{i}.exp_avg"] = st["exp_avg"].detach().numpy()
            arrays[f"opt.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
        return arrays

    def save(self, path, extra: dict | None = None):
        config = {
            "model": self.cfg.to_dict(),
            "optim": {**vars(self.optim_cfg), "betas": list(self.optim_cfg.betas)},
            "repa_weight": self.repa_weight,
            "encoder_dim": self.encoder.out_dim,
            "step": self.step,
            **(extra or {}),
        }
        save_checkpoint(path, self.state_arrays(), config)

    @classmethod
    def load(cls, path) -> tuple["Trainer", dict]:
        arrays, config = load_checkpoint(path)
        optim = config["optim"]
        trainer = cls(
            ModelConfig(**config["model"]),
            OptimConfig(optim["lr"], tuple(optim["betas"]), optim["weight_decay"], optim["grad_clip"]),
            repa_weight=config["repa_weight"],
            encoder_dim=config["encoder_dim"],
        )
        trainer.model.load_state_dict(arrays_to_state("model", arrays))
        for i, p in enumerate(trainer.model.parameters()):
            if f"opt.{i}.step" in arrays:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"opt.{i}.step"].reshape(-1)[0])),
                    "exp_avg": torch.from_numpy(arrays[f"opt.{i}.exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(arrays[f"opt.{i}.exp_avg_sq"]),
                }
        trainer.step = config["step"]
        return trainer, config


class TrainLog:
    """Append-only CSV: step, flow_loss, repa_loss, total, lr, wall_ms."""

    COLUMNS = ("step", "flow_loss", "repa_loss", "total", "lr", "wall_ms")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)
        self._t0 = time.perf_counter()

    def append(self, step: int, losses: LossBreakdown, lr: float):
        wall_ms = (time.perf_counter() - self._t0) * 1000.0
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([step, f"{losses.flow_loss:.8g}", f"{losses.repa_loss:.8g}",
                                    f"{losses.total:.8g}", f"{lr:.6g}", f"{wall_ms:.1f}"])
        self._t0 = time.perf_counter()

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, newline="") as f:
            return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
