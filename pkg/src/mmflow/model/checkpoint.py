"""Checkpoint archive format.

A checkpoint is a zip archive with these members::

    FORMAT_VERSION      ASCII integer (currently 1)
    config.json         JSON object: model config plus any run metadata
    index.json          [{"name": ..., "shape": [...], "file": "arrays/000012.f32"}, ...]
    arrays/NNNNNN.f32   raw row-major little-endian float32 bytes, one per array

Array names are free-form dotted strings (``model.blocks.0.img.qkv.weight``,
``opt.state.3.exp_avg`` ...). Loading returns exactly the float32 values that
were saved.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical contents give identical archive bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> None:
    path = Path(path)
    index = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry("FORMAT_VERSION"), str(FORMAT_VERSION))
        zf.writestr(_entry("config.json"), json.dumps(config, sort_keys=True, indent=2))
        for i, (name, arr) in enumerate(arrays.items()):
            a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            fname = f"arrays/{i:06d}.f32"
            zf.writestr(_entry(fname), a.tobytes(order="C"))
            index.append({"name": name, "shape": list(a.shape), "file": fname})
        zf.writestr(_entry("index.json"), json.dumps(index, indent=1))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        version = int(zf.read("FORMAT_VERSION"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = json.loads(zf.read("config.json"))
        arrays = {}
        for entry in json.loads(zf.read("index.json")):
            buf = zf.read(entry["file"])
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return arrays, config


def state_to_arrays(prefix: str, state_dict) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}


def arrays_to_state(prefix: str, arrays: dict[str, np.ndarray]):
    import torch

    n = len(prefix) + 1
    return {k[n:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")}
