"""Train the dual-stream MMDiT on the toy corpus and sample from it.

Uses the same functions the ``mmflow`` command wraps: gen-data, curate, train
(with the alignment loss on), then shifted-schedule Euler sampling. Takes a few
minutes on one CPU core; pass a smaller step count as the first argument to
shorten it.
"""

import json
import sys
import tempfile
from pathlib import Path

from mmflow.config import RunConfig
from mmflow.pipeline import curate_run, sample_run, train_run
from mmflow.toydata import make_corpus
from mmflow.training import TrainLog

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
root = Path(tempfile.mkdtemp(prefix="mmflow_"))
cfg = RunConfig.load(Path(__file__).parents[1] / "configs" / "smoke.yaml", {"train": {"steps": steps}})

make_corpus(400, seed=0, defect_rate=0.2, out_dir=root / "data")
manifest = root / "data" / "manifest.jsonl"
curate_run(cfg, manifest, root / "weights.csv")
ckpt = train_run(cfg, manifest, root / "run", root / "weights.csv")

log = TrainLog.read(root / "run" / "train_log.csv")
head = sum(r["total"] for r in log[:10]) / 10
tail = sum(r["total"] for r in log[-10:]) / 10
print(f"total loss: first 10 steps {head:.3f}, last 10 steps {tail:.3f}")

meta = sample_run(ckpt, root / "samples", nfe=20, seed=0, captions=["a red circle at the top left"],
                  resolution=(32, 32), n=2, manifest=manifest)
print(json.dumps({k: meta[k] for k in ("kind", "nfe", "shape", "files")}, indent=1))
print(f"outputs under {root}")
