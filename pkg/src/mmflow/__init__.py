"""Flow-matching MMDiT toolkit at toy scale.

Submodules: ``model`` (packing, 2D RoPE, dual-stream transformer, checkpoints),
``training`` (masked flow loss + representation alignment), ``timesteps``
(logit-normal draws, resolution shift), ``curation`` (defect gate, hierarchical
clustering, TF-IDF rarity, retrieval), ``sampling`` (Euler sampler, few-step
distillation, importance-sampled timesteps), ``evaluation`` (reward, text
metrics, Elo), ``toydata`` (procedural corpus) and ``cli``.
"""

from . import curation, evaluation, model, sampling, timesteps, toydata, training
from .errors import ConfigError, DegenerateMaskError, NumericFailure

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateMaskError",
    "NumericFailure",
    "curation",
    "evaluation",
    "model",
    "sampling",
    "timesteps",
    "toydata",
    "training",
]
