"""Flow sampling, few-step distillation and learned timestep importance sampling.

Conventions: t = 0 is data, t = 1 is noise, the velocity field approximates
eps - x0, and sampling integrates from t = 1 down to t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericFailure
from .model.embeddings import timestep_embedding

# --- schedules and Euler integration --------------------------------------


@dataclass(frozen=True)
class ODESchedule:
    timesteps: tuple[float, ...]  # 1 = t_0 > t_1 > ... > t_K = 0

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if len(ts) < 2:
            raise ValueError("a schedule needs at least one step")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValueError(f"schedule must run from 1 to 0, got {ts[0]} .. {ts[-1]}")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("schedule must be strictly decreasing")

    @property
    def nfe(self) -> int:
        return len(self.timesteps) - 1

    @classmethod
    def uniform(cls, k: int) -> "ODESchedule":
        ts = np.linspace(1.0, 0.0, k + 1)
        ts[0], ts[-1] = 1.0, 0.0
        return cls(tuple(ts))

    @classmethod
    def shifted(cls, k: int, alpha: float) -> "ODESchedule":
        u = np.linspace(1.0, 0.0, k + 1)
        ts = alpha * u / (1.0 + (alpha - 1.0) * u)
        ts[0], ts[-1] = 1.0, 0.0
        return cls(tuple(ts))


class CallCounter:
    """Wraps a velocity callable and counts forward evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.fn(*args, **kwargs)


@dataclass
class SampleResult:
    x: torch.Tensor
    nfe: int


def _integrate(model, x, timesteps, condition):
    nfe = 0
    for k, (t_cur, t_next) in enumerate(zip(timesteps, timesteps[1:])):
        v = model(x, t_cur, condition)
        nfe += 1
        x = x + (t_next - t_cur) * v
        if not torch.isfinite(x).all():
            raise NumericFailure("non-finite sampler state", where=f"step {k}")
    return x, nfe


@torch.no_grad()
def euler_sample(model, condition, schedule: ODESchedule, noise: torch.Tensor) -> SampleResult:
    """x_{k+1} = x_k + (t_{k+1} - t_k) v(x_k, t_k; condition), from t=1 to t=0."""
    if not isinstance(schedule, ODESchedule):
        schedule = ODESchedule(tuple(schedule))
    x, nfe = _integrate(model, noise, schedule.timesteps, condition)
    return SampleResult(x, nfe)


@torch.no_grad()
def euler_invert(model, condition, x0: torch.Tensor, n_steps: int = 50) -> torch.Tensor:
    """Integrate the probability-flow ODE forward from data (t=0) to noise (t=1)."""
    ts = np.linspace(0.0, 1.0, n_steps + 1).tolist()
    x, _ = _integrate(model, x0, ts, condition)
    return x


def gaussian_velocity(mu: torch.Tensor):
    """Exact velocity for data ~ N(mu, I), noise ~ N(0, I) under the linear interpolant.

    E[eps - x0 | x_t] = (2t - 1) / s2 * (x - (1 - t) mu) - mu,  s2 = (1 - t)^2 + t^2.
    """

    def v(x, t, condition=None):
        t = float(t)
        s2 = (1 - t) ** 2 + t**2
        return (2 * t - 1) / s2 * (x - (1 - t) * mu) - mu

    return v


# --- toy 2D data and metrics ----------------------------------------------


def two_moons(n: int, gen: torch.Generator, noise: float = 0.05) -> torch.Tensor:
    n1 = n // 2
    n2 = n - n1
    a = torch.rand(n1, generator=gen, dtype=torch.float64) * math.pi
    b = torch.rand(n2, generator=gen, dtype=torch.float64) * math.pi
    upper = torch.stack([torch.cos(a), torch.sin(a)], 1)
    lower = torch.stack([1 - torch.cos(b), 0.5 - torch.sin(b)], 1)
    x = torch.cat([upper, lower])
    x = x + noise * torch.randn(x.shape, generator=gen, dtype=torch.float64)
    x = x[torch.randperm(n, generator=gen)]
    # centre and scale roughly to unit variance
    return ((x - torch.tensor([0.5, 0.25], dtype=torch.float64)) / torch.tensor([0.87, 0.5],
                                                                                dtype=torch.float64)).float()


def eight_gaussians(n: int, gen: torch.Generator, radius: float = 2.0, std: float = 0.15) -> torch.Tensor:
    k = torch.randint(0, 8, (n,), generator=gen)
    ang = k.double() * (2 * math.pi / 8)
    centers = radius * torch.stack([torch.cos(ang), torch.sin(ang)], 1)
    return (centers + std * torch.randn(n, 2, generator=gen, dtype=torch.float64)).float()


def energy_distance(x: torch.Tensor, y: torch.Tensor, chunk: int = 2048) -> float:
    """2 E|X-Y| - E|X-X'| - E|Y-Y'| with unbiased within-sample terms."""
    x, y = x.double().reshape(len(x), -1), y.double().reshape(len(y), -1)

    def mean_dist(a, b, same):
        total = 0.0
        for i in range(0, len(a), chunk):
            total += torch.cdist(a[i:i + chunk], b).sum().item()
        n = len(a) * len(b) - (len(a) if same else 0)
        return total / n

    return 2 * mean_dist(x, y, False) - mean_dist(x, x, True) - mean_dist(y, y, True)


# --- small velocity network for low-dimensional toys ----------------------


class VelocityMLP(nn.Module):
    def __init__(self, dim: int = 2, hidden: int = 256, depth: int = 3, t_dim: int = 64):
        super().__init__()
        self.t_dim = t_dim
        layers, d = [], dim + t_dim
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.SiLU()]
            d = hidden
        layers.append(nn.Linear(d, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x, t, condition=None):
        t = torch.as_tensor(t, dtype=x.dtype).expand(x.shape[0])
        return self.net(torch.cat([x, timestep_embedding(t, self.t_dim)], dim=-1))


def train_flow(net: nn.Module, data: torch.Tensor, steps: int, gen: torch.Generator,
               batch: int = 512, lr: float = 1e-3, importance: "ImportanceSampler | None" = None):
    """Plain flow-matching regression on a fixed dataset; returns per-step losses."""
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    history = []
    for _ in range(steps):
        x0 = data[torch.randint(0, len(data), (batch,), generator=gen)]
        eps = torch.randn(x0.shape, generator=gen)

        def per_sample_loss(t):
            tt = t[:, None].to(x0.dtype)
            xt = (1 - tt) * x0 + tt * eps
            v = net.net(torch.cat([xt, timestep_embedding(t.to(x0.dtype), net.t_dim)], -1))
            return (v - (eps - x0)).pow(2).sum(-1)

        if importance is None:
            loss = per_sample_loss(torch.rand(batch, generator=gen)).mean()
        else:
            loss = importance.step(per_sample_loss, torch.ones(batch, 1), gen)["weighted_loss"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
    return history


# --- consistent noise expectation and distillation -------------------------


@dataclass
class NoiseExpectation:
    eps_hat: torch.Tensor
    probes: int
    anchors: tuple[float, ...]


DEFAULT_ANCHORS = (0.25, 0.5, 0.75)


@torch.no_grad()
def estimate_noise_expectation(teacher, x0: torch.Tensor, condition=None, probes=16,
                               anchors=DEFAULT_ANCHORS, gen: torch.Generator | None = None,
                               unified: bool = False) -> NoiseExpectation:
    """eps_hat = mean over probes j and anchors a of [v(x_{t_a}(eps_j), t_a) + x0].

    ``probes`` is either a count M (probe noises drawn from ``gen``) or an
    explicit (M, *x0.shape) tensor. With ``unified`` the per-sample estimate is
    replaced by its mean over the batch.
    """
    if isinstance(probes, int):
        if probes < 1:
            raise ValueError("need at least one probe")
        probes = torch.randn((probes, *x0.shape), generator=gen, dtype=x0.dtype)
    total = torch.zeros_like(x0)
    for eps in probes:
        for t in anchors:
            xt = (1 - t) * x0 + t * eps
            v = teacher(xt, t, condition)
            if not torch.isfinite(v).all():
                raise NumericFailure("non-finite teacher velocity", where=f"anchor t={t}")
            total += v + x0
    eps_hat = total / (len(probes) * len(anchors))
    if unified:
        eps_hat = eps_hat.mean(0, keepdim=True).expand_as(eps_hat).clone()
    return NoiseExpectation(eps_hat, len(probes), tuple(anchors))


@torch.no_grad()
def trajectory_noise_expectation(teacher, probes: torch.Tensor, condition=None, n_steps: int = 50):
    """Run the teacher from ``probes`` to data and average its velocity over the path.

    Returns (x0, eps_hat) with eps_hat = x0 + mean_k v(x_{t_k}, t_k), the mean taken
    over every timestep of the teacher's own trajectory. Because the Euler
    endpoint is x0 = eps - (1/K) sum_k v_k, eps_hat reproduces the probe up to
    rounding: the ray x0 -> eps_hat is the straight chord of the teacher path.
    """
    schedule = ODESchedule.uniform(n_steps)
    x = probes
    total = torch.zeros_like(probes)
    for k, (t_cur, t_next) in enumerate(zip(schedule.timesteps, schedule.timesteps[1:])):
        v = teacher(x, t_cur, condition)
        if not torch.isfinite(v).all():
            raise NumericFailure("non-finite teacher velocity", where=f"step {k}")
        total += v
        x = x + (t_next - t_cur) * v
    return x, x + total / n_steps


def student_timesteps(k: int) -> torch.Tensor:
    """The grid points a K-step uniform Euler sampler evaluates at."""
    return torch.tensor(ODESchedule.uniform(k).timesteps[:-1])


def distill_student(teacher, student: nn.Module, dataset: torch.Tensor, k_student: int, steps: int,
                    gen: torch.Generator, batch: int = 512, lr: float = 1e-3,
                    probe: str = "forward_backward", n_probes: int = 16, teacher_steps: int = 50,
                    anchors=DEFAULT_ANCHORS, targets=None):
    """Fit ``student`` to per-sample straight rays x0 -> eps_hat.

    Loss: || v_student((1-t) x0 + t eps_hat, t) - (eps_hat - x0) ||^2 with t on the
    student's K-step grid.

    ``probe`` picks how (x0, eps_hat) pairs are built:

    * ``"forward_backward"``: invert each data point through the teacher ODE
      (data -> noise), regenerate it (noise -> data) and take the path-averaged
      noise expectation of that trajectory.
    * ``"inversion"`` / ``"random"``: keep the data point and apply
      ``estimate_noise_expectation`` on the straight chord, with the inverted
      noise or ``n_probes`` Gaussian draws as probes.

    Precomputed ``targets=(x0, eps_hat)`` skip the teacher entirely.
    Returns (history, (x0, eps_hat)).
    """
    if targets is None:
        if probe == "forward_backward":
            probes = euler_invert(teacher, None, dataset, teacher_steps)
            targets = trajectory_noise_expectation(teacher, probes, None, teacher_steps)
        elif probe == "inversion":
            probes = euler_invert(teacher, None, dataset, teacher_steps)[None]
            targets = (dataset, estimate_noise_expectation(teacher, dataset, None, probes, anchors).eps_hat)
        elif probe == "random":
            ne = estimate_noise_expectation(teacher, dataset, None, n_probes, anchors, gen)
            targets = (dataset, ne.eps_hat)
        else:
            raise ValueError(f"unknown probe mode {probe!r}")
    x0_all, eps_all = targets
    grid = student_timesteps(k_student)
    opt = torch.optim.Adam(student.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    history = []
    for _ in range(steps):
        idx = torch.randint(0, len(x0_all), (batch,), generator=gen)
        x0, e = x0_all[idx], eps_all[idx]
        t = grid[torch.randint(0, len(grid), (batch,), generator=gen)].to(x0.dtype)
        xt = (1 - t[:, None]) * x0 + t[:, None] * e
        v = student.net(torch.cat([xt, timestep_embedding(t, student.t_dim)], -1))
        loss = (v - (e - x0)).pow(2).sum(-1).mean()
        if not torch.isfinite(loss):
            raise NumericFailure("non-finite distillation loss", where=f"step {len(history)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
    return history, targets


# --- learned timestep importance sampling ---------------------------------


@dataclass
class TimestepProposal:
    q: torch.Tensor  # (n, B) bin probabilities, rows sum to 1
    floor: float

    @property
    def bins(self) -> int:
        return self.q.shape[-1]

    @property
    def weights(self) -> torch.Tensor:
        """Importance weight per bin: p_uniform(b) / q(b)."""
        return (1.0 / self.bins) / self.q


class ProposalNet(nn.Module):
    """Maps per-sample features to logits over timestep bins; starts uniform."""

    def __init__(self, in_dim: int = 1, bins: int = 32, hidden: int = 64):
        super().__init__()
        self.bins = bins
        self.body = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU())
        self.head = nn.Linear(hidden, bins)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features):
        return self.head(self.body(features))


def floored_probs(logits: torch.Tensor, floor: float) -> torch.Tensor:
    B = logits.shape[-1]
    if floor * B >= 1.0:
        raise ValueError(f"floor {floor} too large for {B} bins")
    p = floor + (1.0 - B * floor) * logits.softmax(-1)
    return p / p.sum(-1, keepdim=True)


def propose_timesteps(net: ProposalNet, features: torch.Tensor, floor: float = 1e-3) -> TimestepProposal:
    with torch.no_grad():
        logits = net(features).double()
    return TimestepProposal(floored_probs(logits, floor), floor)


class ImportanceSampler:
    """Draws timesteps from a learned proposal and reweights the loss to stay unbiased.

    The proposal is trained toward q*(b) proportional to the root-mean-square of
    per-bin losses (tracked by an EMA), the variance-minimising choice for a
    piecewise-constant proposal.
    """

    def __init__(self, in_dim: int = 1, bins: int = 32, floor: float = 1e-3, ema: float = 0.9,
                 lr: float = 1e-2, seed: int = 0):
        torch.manual_seed(seed)
        self.net = ProposalNet(in_dim, bins)
        self.floor = floor
        self.decay = ema
        self.opt = torch.optim.Adam(self.net.parameters(), lr=lr)
        self.sq_loss_ema = torch.zeros(bins, dtype=torch.float64)
        self.seen = torch.zeros(bins, dtype=torch.bool)

    @property
    def bins(self) -> int:
        return self.net.bins

    def sample(self, features: torch.Tensor, gen: torch.Generator):
        prop = propose_timesteps(self.net, features, self.floor)
        b = torch.multinomial(prop.q, 1, generator=gen).squeeze(1)
        u = torch.rand(len(b), generator=gen, dtype=torch.float64)
        t = (b.double() + u) / self.bins
        w = prop.weights.gather(1, b[:, None]).squeeze(1)
        return t.float(), b, w.float()

    def target(self) -> torch.Tensor:
        rms = self.sq_loss_ema.clamp_min(0).sqrt()
        if not self.seen.all():
            fill = rms[self.seen].max() if self.seen.any() else torch.tensor(1.0, dtype=rms.dtype)
            rms = torch.where(self.seen, rms, fill)
        if rms.sum() <= 0:
            return torch.full_like(rms, 1.0 / self.bins)
        return rms / rms.sum()

    def update(self, bins: torch.Tensor, losses: torch.Tensor, features: torch.Tensor):
        """Fold observed per-sample losses into the EMA and take one proposal step."""
        sq = losses.detach().double() ** 2
        for b in torch.unique(bins):
            m = bins == b
            mean_sq = sq[m].mean()
            if self.seen[b]:
                self.sq_loss_ema[b] = self.decay * self.sq_loss_ema[b] + (1 - self.decay) * mean_sq
            else:
                self.sq_loss_ema[b] = mean_sq
                self.seen[b] = True
        target = self.target().float()
        log_q = floored_probs(self.net(features), self.floor).log()
        loss = -(target[None] * log_q).sum(-1).mean()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return loss.item()

    def step(self, loss_fn, features: torch.Tensor, gen: torch.Generator) -> dict:
        """One importance-weighted estimate of the uniform-t loss plus a proposal update.

        ``loss_fn(t)`` maps (n,) timesteps to (n,) per-sample losses.
        """
        t, b, w = self.sample(features, gen)
        losses = loss_fn(t)
        weighted = (w.to(losses.dtype) * losses).mean()
        kl = self.update(b, losses, features)
        return {"weighted_loss": weighted, "losses": losses.detach(), "t": t, "bins": b,
                "weights": w, "proposal_loss": kl}


def importance_train_step(model_loss_fn, sampler: ImportanceSampler, features: torch.Tensor,
                          gen: torch.Generator) -> dict:
    return sampler.step(model_loss_fn, features, gen)


# --- MMDiT adapter ---------------------------------------------------------


class ImageVelocity:
    """Velocity callable over a batch of same-shape token grids for one MMDiT."""

    def __init__(self, flow_model, captions, sizes):
        self.flow_model = flow_model
        self.captions = list(captions)
        self.sizes = list(sizes)

    @torch.no_grad()
    def __call__(self, x, t, condition=None):
        out = self.flow_model.velocity(list(x), self.captions, self.sizes, float(t))
        return torch.stack(out).to(x.dtype)
