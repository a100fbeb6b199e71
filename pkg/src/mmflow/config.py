"""Run configuration: YAML file with model/timestep/data/train/distill/eval sections."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

# section -> key -> (default, help)
SCHEMA = {
    "model": {
        "depth": (6, "joint blocks"),
        "hidden": (256, "residual width"),
        "heads": (4, "attention heads; hidden / heads must be divisible by 4"),
        "patch_size": (2, "latent patch side"),
        "rope_base": (10000.0, "RoPE base frequency"),
        "tap_layer": (None, "block whose image features feed the alignment loss; null = depth // 2"),
        "text_dim": (64, "character embedding width"),
        "vocab_size": (128, "character vocabulary (code points >= this share one id)"),
        "freq_dim": (256, "sinusoidal width of timestep/size conditioning"),
        "mlp_ratio": (4.0, "MLP width multiplier"),
    },
    "timestep": {
        "logit_mean": (0.0, "logit-normal location"),
        "logit_std": (1.0, "logit-normal scale"),
        "base_resolution": (1024.0, "pixel count with shift factor 1 (32x32 on the toy ladder)"),
    },
    "data": {
        "n": (1000, "records generated by gen-data"),
        "seed": (0, "corpus / clustering seed"),
        "defect_rate": (0.2, "fraction of records carrying a defect box, in [0, 1]"),
        "defect_threshold": (0.2, "retain a record iff its defect area < threshold"),
        "cluster_k": (8, "k-means branching"),
        "cluster_depth": (2, "hierarchy levels"),
        "gamma_visual": (1.0, "exponent of the cluster-balance factor"),
        "gamma_text": (1.0, "exponent of the caption-rarity factor"),
        "emb_dim": (64, "toy embedding width"),
    },
    "train": {
        "steps": (500, "total optimiser steps"),
        "batch": (8, "samples packed per step"),
        "lr": (1e-4, "AdamW learning rate"),
        "lambda_repa": (0.5, "weight of the representation alignment loss; 0 disables it"),
        "grad_clip": (1.0, "global gradient-norm clip"),
        "weight_decay": (0.0, "AdamW weight decay"),
        "encoder_dim": (64, "width of the frozen alignment encoder"),
        "seed": (0, "step RNG seed"),
        "checkpoint_every": (0, "intermediate checkpoint period; 0 = only at the end"),
    },
    "distill": {
        "nfe_student": (4, "student Euler steps"),
        "teacher_nfe": (50, "teacher ODE steps for inversion and regeneration"),
        "steps": (100, "student optimiser steps"),
        "batch": (4, "records per step (one resolution bucket)"),
        "lr": (1e-4, "student learning rate"),
        "seed": (0, "step RNG seed"),
    },
    "eval": {
        "normalize": (False, "NFKC + casefold before text metrics"),
        "elo_k": (32.0, "Elo K factor"),
        "elo_initial": (1000.0, "rating of a newly seen model"),
    },
}

DEFAULTS = {sec: {k: v[0] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def describe() -> str:
    """Every config key with its default, for --help."""
    lines = []
    for sec, keys in SCHEMA.items():
        for k, (default, text) in keys.items():
            lines.append(f"  {sec}.{k} = {json.dumps(default)}  {text}")
    return "\n".join(lines)


class RunConfig(dict):
    """Nested dict of config sections with unknown-key and type validation."""

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path) as f:
                    user = yaml.safe_load(f) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            _merge(cfg, user, "")
        if overrides:
            _merge(cfg, overrides, "")
        return cls(cfg)

    def apply(self, overrides: dict) -> "RunConfig":
        _merge(self, overrides, "")
        return self

    def hash(self) -> str:
        blob = json.dumps(self, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(dict(self), sort_keys=True))


def _coerce(name: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")


def _merge(base: dict, update: dict, prefix: str) -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, name + ".")
        else:
            sec = prefix.rstrip(".")
            base[key] = _coerce(name, SCHEMA[sec][key][0], value)


def overrides_from_flags(pairs) -> dict:
    """Turn [("train.steps", 10), ...] into a nested dict, skipping None values."""
    out: dict = {}
    for dotted, value in pairs:
        if value is None:
            continue
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} is not of the form section.key")
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})[key] = value
    return out


def parse_assignment(text: str) -> tuple[str, object]:
    """``section.key=value`` with the value parsed as YAML (so 3, 0.5, true, null work)."""
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
