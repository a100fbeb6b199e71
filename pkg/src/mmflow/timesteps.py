"""Resolution-aware timestep distribution.

Training timesteps are drawn from a logit-normal and then pushed toward the
noise end (t -> 1, lower SNR) by a shift factor that grows with the pixel
count of the resolution bucket. Inference uses the same shift, computed from
the requested output size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# largest double below 1; keeps sigmoid outputs strictly inside (0, 1)
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class LogitNormalParams:
    location: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"logit-normal scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class ShiftSchedule:
    shift_factor: float
    base_resolution: float
    source: str = "train_dataset_average"  # or "inference_target"

    def apply(self, t):
        return shift_timestep(t, self.shift_factor)


def sample_logit_normal(params: LogitNormalParams, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.normal(params.location, params.scale, size=n)
    return np.clip(expit(z), _TINY, _ONE_MINUS)


def _shift(t, alpha):
    t = np.asarray(t, dtype=np.float64)
    return alpha * t / (1.0 + (alpha - 1.0) * t)


def shift_timestep(t, alpha: float):
    """Map t -> alpha*t / (1 + (alpha-1)*t). Monotone bijection of (0, 1) for alpha > 0."""
    if not alpha > 0:
        raise ValueError(f"shift factor must be positive, got {alpha}")
    arr = np.asarray(t, dtype=np.float64)
    if np.any((arr <= 0) | (arr >= 1)):
        raise ValueError("timesteps must lie in the open interval (0, 1)")
    out = _shift(arr, alpha)
    return float(out) if np.ndim(t) == 0 else out


def resolution_shift_factor(resolution, base_resolution: float = 256.0**2) -> float:
    """alpha = sqrt(h*w / base); aspect ratio only matters through the pixel count."""
    h, w = resolution
    if h <= 0 or w <= 0 or base_resolution <= 0:
        raise ValueError("resolution and base must be positive")
    return float(np.sqrt(h * w / base_resolution))


def average_resolution(resolutions) -> tuple[float, float]:
    """Bucket statistic used for the training shift: (sqrt(mean pixel count),) * 2."""
    px = np.mean([h * w for h, w in resolutions])
    side = float(np.sqrt(px))
    return side, side


def training_timestep(dataset_resolution, params: LogitNormalParams, rng: np.random.Generator,
                      n: int = 1, base_resolution: float = 256.0**2) -> np.ndarray:
    """Draw ``n`` training timesteps for a bucket whose average resolution is given."""
    alpha = resolution_shift_factor(dataset_resolution, base_resolution)
    return _shift(sample_logit_normal(params, n, rng), alpha)


def inference_schedule(n_steps: int, resolution, base_resolution: float = 256.0**2) -> np.ndarray:
    """Shifted timesteps 1 = t_0 > ... > t_K = 0 for sampling at ``resolution``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    alpha = resolution_shift_factor(resolution, base_resolution)
    return _shift(np.linspace(1.0, 0.0, n_steps + 1), alpha)
