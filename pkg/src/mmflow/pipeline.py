"""End-to-end runs over a generated corpus: curate, train, distill, sample.

Every run is a function of its config and seed; per-step randomness comes from
generators seeded with ``(seed, step)`` so resumed runs replay identically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import curation
from .config import RunConfig
from .model.mmdit import ModelConfig, image_token_grid, latent_to_image
from .model.packing import SizeCondition, unpatchify
from .sampling import (
    CallCounter,
    ImageVelocity,
    ODESchedule,
    energy_distance,
    euler_invert,
    euler_sample,
    student_timesteps,
    trajectory_noise_expectation,
)
from .timesteps import LogitNormalParams, resolution_shift_factor, training_timestep
from .toydata import downsample, load_image, text_embedding
from .training import OptimConfig, TrainExample, Trainer, TrainLog, flow_loss


@dataclass
class Corpus:
    root: Path
    records: list
    images: list  # float32 (h, w, 3) arrays

    @classmethod
    def load(cls, manifest) -> "Corpus":
        manifest = Path(manifest)
        records = curation.read_manifest(manifest)
        images = [load_image(manifest.parent, r) for r in records]
        return cls(manifest.parent, records, images)


def _generators(seed: int, step: int):
    rng = np.random.default_rng([seed, step])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def curate_run(cfg: RunConfig, manifest, out_csv, queries=(), boost: float = 0.0, k_retrieve: int = 10):
    d = cfg["data"]
    records = curation.read_manifest(manifest)
    weights = curation_weights(cfg, records)
    if queries:
        text_emb = np.stack([r.text_emb for r in records])
        q = [text_embedding(s, d["emb_dim"]) for s in queries]
        weights = curation.retrieval_calibrate(weights, q, text_emb, boost, k_retrieve)
    curation.export_weights(out_csv, [r.id for r in records], weights)
    return weights


def make_example(cfg: ModelConfig, record, image, rng, gen, t_params, base_res) -> TrainExample:
    grid = image_token_grid(torch.from_numpy(image), cfg)
    mask = curation.build_defect_mask(record, grid.shape)
    t = float(training_timestep(record.resolution, t_params, rng, 1, base_res)[0])
    eps = torch.randn(grid.latent_patches.shape, generator=gen)
    return TrainExample(grid, record.caption, SizeCondition(*record.resolution), t, eps, mask)


def curation_weights(cfg: RunConfig, records) -> curation.SampleWeights:
    d = cfg["data"]
    return curation.curate(records, k=d["cluster_k"], depth=d["cluster_depth"],
                           gamma_visual=d["gamma_visual"], gamma_text=d["gamma_text"],
                           threshold=d["defect_threshold"], seed=d["seed"])


def _sampling_probs(cfg: RunConfig, corpus: Corpus, weights_csv):
    """Record sampling probabilities: from a weights CSV, "uniform", or curated on the fly (None)."""
    if weights_csv == "uniform":
        return np.full(len(corpus.records), 1.0 / len(corpus.records))
    if weights_csv is None:
        w = curation_weights(cfg, corpus.records).weights
    else:
        table = curation.read_weights(weights_csv)
        w = np.array([table.get(r.id, 0.0) for r in corpus.records])
    if not w.sum() > 0:
        raise ValueError("sampling weights are all zero")
    return w / w.sum()


def train_run(cfg: RunConfig, manifest, out_dir, weights_csv=None, resume=None) -> Path:
    """Train to ``train.steps`` total steps; writes checkpoint.zip and train_log.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc, ts = cfg["train"], cfg["timestep"]
    corpus = Corpus.load(manifest)
    probs = _sampling_probs(cfg, corpus, weights_csv)
    if resume is not None:
        trainer, _ = Trainer.load(resume)
    else:
        optim = OptimConfig(tc["lr"], (0.9, 0.95), tc["weight_decay"], tc["grad_clip"])
        trainer = Trainer(model_config(cfg), optim, tc["lambda_repa"], tc["encoder_dim"], seed=tc["seed"])
    t_params = LogitNormalParams(ts["logit_mean"], ts["logit_std"])
    train_log = TrainLog(out_dir / "train_log.csv")
    extra = {"run": dict(cfg), "config_hash": cfg.hash(), "kind": "teacher"}
    while trainer.step < tc["steps"]:
        rng, gen = _generators(tc["seed"], trainer.step)
        idx = rng.choice(len(corpus.records), size=tc["batch"], p=probs)
        examples = [make_example(trainer.cfg, corpus.records[i], corpus.images[i], rng, gen, t_params,
                                 ts["base_resolution"]) for i in idx]
        losses = trainer.train_step(examples)
        train_log.append(trainer.step, losses, trainer.optim_cfg.lr)
        if tc["checkpoint_every"] and trainer.step % tc["checkpoint_every"] == 0:
            trainer.save(out_dir / f"checkpoint_{trainer.step:06d}.zip", extra)
    ckpt = out_dir / "checkpoint.zip"
    trainer.save(ckpt, extra)
    return ckpt


def _bucketed(corpus: Corpus, probs: np.ndarray, rng, batch: int):
    """Draw one resolution bucket (by total weight), then ``batch`` records inside it."""
    res = np.array([r.resolution for r in corpus.records])
    keys, inv = np.unique(res, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    bucket_w = np.bincount(inv, weights=probs, minlength=len(keys))
    b = rng.choice(len(keys), p=bucket_w / bucket_w.sum())
    members = np.flatnonzero(inv == b)
    p = probs[members] / probs[members].sum()
    return members[rng.choice(len(members), size=batch, p=p)]


def distill_run(cfg: RunConfig, teacher_ckpt, manifest, out_dir, weights_csv=None) -> Path:
    """Few-step student from a trained checkpoint via forward-backward noise expectations."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dc = cfg["distill"]
    teacher, tconf = Trainer.load(teacher_ckpt)
    teacher.model.eval()
    student, _ = Trainer.load(teacher_ckpt)
    student.optimizer = torch.optim.AdamW(student.model.parameters(), lr=dc["lr"], betas=(0.9, 0.95))
    corpus = Corpus.load(manifest)
    probs = _sampling_probs(cfg, corpus, weights_csv)
    grid = student_timesteps(dc["nfe_student"])
    history = []
    for step in range(dc["steps"]):
        rng, gen = _generators(dc["seed"], step)
        idx = _bucketed(corpus, probs, rng, dc["batch"])
        recs = [corpus.records[i] for i in idx]
        x0 = torch.stack([image_token_grid(torch.from_numpy(corpus.images[i]), teacher.cfg).latent_patches
                          for i in idx])
        captions = [r.caption for r in recs]
        sizes = [SizeCondition(*r.resolution) for r in recs]
        velocity = ImageVelocity(teacher.model, captions, sizes)
        probes = euler_invert(velocity, None, x0, dc["teacher_nfe"])
        x0_hat, eps_hat = trajectory_noise_expectation(velocity, probes, None, dc["teacher_nfe"])
        t = float(grid[rng.integers(len(grid))])
        xt = (1 - t) * x0_hat + t * eps_hat
        v = student.model.velocity(list(xt), captions, sizes, t)
        loss = torch.stack([flow_loss(vp, e - x) for vp, e, x in zip(v, eps_hat, x0_hat)]).mean()
        student.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(student.model.parameters(), cfg["train"]["grad_clip"])
        student.optimizer.step()
        history.append(loss.item())
    with open(out_dir / "distill_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, l in enumerate(history):
            w.writerow([i + 1, f"{l:.8g}"])
    ckpt = out_dir / "student.zip"
    extra = {k: v for k, v in tconf.items() if k not in ("model", "optim", "repa_weight", "encoder_dim", "step")}
    extra.update(kind="student", nfe_student=dc["nfe_student"], distill=dict(dc), config_hash=cfg.hash())
    student.save(ckpt, extra)
    return ckpt


def sample_run(ckpt, out_dir, nfe: int, seed: int, captions=None, resolution=(32, 32), n: int = 4,
               manifest=None, base_resolution: float | None = None) -> dict:
    """Generate ``n`` images; writes raw float32 dumps, samples.json and nfe_quality.csv."""
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    trainer, conf = Trainer.load(ckpt)
    trainer.model.eval()
    mcfg = trainer.cfg
    h, w = resolution
    if captions is None:
        captions = ["a red square at center"] * n
    captions = list(captions)[:n] if len(captions) >= n else (list(captions) * n)[:n]
    sizes = [SizeCondition(h, w)] * n
    if conf.get("kind") == "student":
        schedule = ODESchedule.uniform(nfe)
    else:
        base = base_resolution or conf.get("run", {}).get("timestep", {}).get("base_resolution", 1024.0)
        schedule = ODESchedule.shifted(nfe, resolution_shift_factor((h, w), base))
    lat_shape = (h // (2 * mcfg.patch_size), w // (2 * mcfg.patch_size), mcfg.token_dim)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn((n, *lat_shape), generator=gen)
    counter = CallCounter(ImageVelocity(trainer.model, captions, sizes))
    result = euler_sample(counter, None, schedule, noise)
    images = [latent_to_image(unpatchify(x, mcfg.patch_size)).numpy() for x in result.x]
    files = []
    for i, img in enumerate(images):
        fname = f"samples/{i:04d}.f32"
        np.ascontiguousarray(img, dtype="<f4").tofile(out_dir / fname)
        files.append(fname)
    quality = float("nan")
    if manifest is not None:
        corpus = Corpus.load(manifest)
        ref = [downsample(im).ravel() for r, im in zip(corpus.records, corpus.images) if r.resolution == (h, w)]
        if ref:
            gen_feats = torch.tensor(np.stack([downsample(im).ravel() for im in images]))
            quality = energy_distance(gen_feats, torch.tensor(np.stack(ref)))
    meta = {
        "checkpoint": str(ckpt),
        "kind": conf.get("kind", "teacher"),
        "config_hash": conf.get("config_hash"),
        "nfe": counter.calls,
        "seed": seed,
        "timesteps": list(schedule.timesteps),
        "shape": [h, w, 3],
        "dtype": "<f4",
        "files": files,
        "captions": captions,
    }
    (out_dir / "samples.json").write_text(json.dumps(meta, indent=2))
    quality_csv = out_dir / "nfe_quality.csv"
    new = not quality_csv.exists()
    with quality_csv.open("a", newline="") as f:
        wr = csv.writer(f)
        if new:
            wr.writerow(["nfe", "n_samples", "energy_distance"])
        wr.writerow([counter.calls, n, f"{quality:.8g}"])
    return meta
