"""Dual-axis data sampling: visual cluster balance times caption rarity.

Records are weighted by ``(1 / |leaf cluster|)^gamma_v * (1 + rarity)^gamma_t``;
records whose defect area fails the retention gate get weight zero. Weights can
then be calibrated by boosting records retrieved for expert concept queries.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .training import DEFECT_THRESHOLD, DefectMask, defect_gate


@dataclass
class CorpusRecord:
    id: str
    image: str
    caption: str
    image_emb: np.ndarray
    text_emb: np.ndarray
    defect_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    height: int = 0
    width: int = 0

    def __post_init__(self):
        self.image_emb = np.asarray(self.image_emb, dtype=np.float64)
        self.text_emb = np.asarray(self.text_emb, dtype=np.float64)
        self.defect_boxes = [tuple(map(float, b)) for b in self.defect_boxes]
        for x, y, w, h in self.defect_boxes:
            if w < 0 or h < 0 or x < 0 or y < 0 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
                raise ValueError(f"record {self.id}: box {(x, y, w, h)} outside the unit square")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.height, self.width

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "caption": self.caption,
            "image_emb": self.image_emb.tolist(),
            "text_emb": self.text_emb.tolist(),
            "defect_boxes": [list(b) for b in self.defect_boxes],
            "height": self.height,
            "width": self.width,
        }


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def read_manifest(path) -> list[CorpusRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(CorpusRecord(**json.loads(line)))
    return out


def build_defect_mask(record: CorpusRecord, latent_grid) -> DefectMask:
    """Mask every grid cell whose centre lies inside a defect box."""
    R, C = latent_grid
    cy = (np.arange(R) + 0.5) / R
    cx = (np.arange(C) + 0.5) / C
    masked = np.zeros((R, C), dtype=bool)
    for x, y, w, h in record.defect_boxes:
        rows = (cy >= y) & (cy <= y + h)
        cols = (cx >= x) & (cx <= x + w)
        masked |= rows[:, None] & cols[None, :]
    return DefectMask(~masked)


def defect_area(record: CorpusRecord, grid=None) -> float:
    """Defect fraction measured on ``grid`` (default: the record's pixel grid)."""
    if grid is None:
        grid = record.resolution if min(record.resolution) > 0 else (64, 64)
    return build_defect_mask(record, grid).area_fraction_defect


# --- visual axis -----------------------------------------------------------


@dataclass
class ClusterAssignment:
    paths: np.ndarray  # (n, depth) cluster id per hierarchy level

    @property
    def depth(self) -> int:
        return self.paths.shape[1]

    def leaf_ids(self) -> np.ndarray:
        """Dense integer id of each record's leaf cluster."""
        _, inv = np.unique(self.paths, axis=0, return_inverse=True)
        return inv.reshape(-1)

    def leaf_sizes(self) -> np.ndarray:
        return np.bincount(self.leaf_ids())


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded from the point farthest from its centre; any
    still empty afterwards are pruned. Labels are returned densely numbered.
    """
    n = len(x)
    k = min(k, n)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))

    labels = np.full(n, -1)
    for _ in range(n_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = dist.argmin(1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = dist[np.arange(n), new].argmax()
            centers[j] = x[far]
            dist[:, j] = ((x - centers[j]) ** 2).sum(1)
            new = dist.argmin(1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
    _, dense = np.unique(labels, return_inverse=True)
    return dense.reshape(-1)


def hierarchical_cluster(embeddings, k: int = 8, depth: int = 2, seed: int = 0) -> ClusterAssignment:
    """Recursive k-means: level 1 over everything, each further level inside its parent.

    A node holding fewer than ``k`` records is not split further; its children
    all get id 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    paths = np.zeros((len(x), depth), dtype=np.int64)

    def split(idx, level):
        if level == depth:
            return
        if len(idx) < k:
            paths[idx, level:] = 0
            return
        labels = kmeans(x[idx], k, rng)
        paths[idx, level] = labels
        for j in np.unique(labels):
            split(idx[labels == j], level + 1)

    split(np.arange(len(x)), 0)
    return ClusterAssignment(paths)


# --- textual axis ----------------------------------------------------------

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class TfIdfIndex:
    vocabulary: list[str]
    document_frequency: dict[str, int]
    term_frequencies: list[dict[str, float]]
    rarity: np.ndarray
    n_docs: int

    def idf(self, term: str) -> float:
        return math.log(self.n_docs / self.document_frequency[term])


def tfidf_rarity(captions) -> TfIdfIndex:
    """tfidf = (count / doc length) * ln(N / df); rarity = mean over a doc's distinct terms."""
    captions = list(captions)
    if not captions:
        raise ValueError("empty corpus")
    docs = [Counter(tokenize(c)) for c in captions]
    df = Counter()
    for d in docs:
        df.update(d.keys())
    N = len(docs)
    tfs, rarity = [], np.zeros(N)
    for i, d in enumerate(docs):
        total = sum(d.values())
        tf = {t: n / total for t, n in d.items()}
        tfs.append(tf)
        if tf:
            rarity[i] = np.mean([v * math.log(N / df[t]) for t, v in tf.items()])
    return TfIdfIndex(sorted(df), dict(df), tfs, rarity, N)


# --- combination -----------------------------------------------------------


@dataclass
class SampleWeights:
    weights: np.ndarray  # normalised, sums to 1
    normalization: float

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.weights), size=n, p=self.weights)


def dual_axis_weights(clusters: ClusterAssignment, index: TfIdfIndex, gamma_visual: float = 1.0,
                      gamma_text: float = 1.0, defect_areas=None,
                      threshold: float = DEFECT_THRESHOLD) -> SampleWeights:
    n = len(clusters.paths)
    if index.n_docs != n:
        raise ValueError("cluster assignment and tf-idf index cover different record counts")
    retained = np.ones(n, dtype=bool)
    if defect_areas is not None:
        retained = np.array([defect_gate(a, threshold) for a in defect_areas], dtype=bool)
    leaf = clusters.leaf_ids()
    # cluster sizes counted over retained records so the balance holds after gating
    sizes = np.bincount(leaf[retained], minlength=leaf.max() + 1).astype(np.float64)
    raw = np.zeros(n)
    r = retained
    raw[r] = (1.0 / sizes[leaf[r]]) ** gamma_visual * (1.0 + index.rarity[r]) ** gamma_text
    z = raw.sum()
    if not z > 0:
        raise ValueError("all sample weights are zero: nothing survives curation")
    return SampleWeights(raw / z, float(z))


@dataclass
class RetrievalResult:
    indices: np.ndarray
    ids: list
    similarities: np.ndarray
    truncated: bool  # True when k exceeded the corpus size


def cross_modal_retrieve(query, corpus_embeddings, k: int, ids=None) -> RetrievalResult:
    """Exact top-k by cosine similarity; ties go to the smaller record id."""
    emb = np.asarray(corpus_embeddings, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    ids = list(range(len(emb))) if ids is None else list(ids)
    sims = emb @ q / np.maximum(np.linalg.norm(emb, axis=1) * np.linalg.norm(q), 1e-12)
    truncated = k > len(emb)
    order = sorted(range(len(emb)), key=lambda i: (-sims[i], ids[i]))[: min(k, len(emb))]
    order = np.asarray(order, dtype=np.int64)
    return RetrievalResult(order, [ids[i] for i in order], sims[order], truncated)


def retrieval_calibrate(weights: SampleWeights, queries, corpus_embeddings, boost: float,
                        k: int = 10, ids=None) -> SampleWeights:
    """Multiply retrieved records' weights by (1 + boost * similarity) and renormalise."""
    if boost < 0:
        raise ValueError("boost must be non-negative")
    factor = np.ones(len(weights.weights))
    best = np.zeros(len(weights.weights))
    for q in queries:
        res = cross_modal_retrieve(q, corpus_embeddings, k, ids)
        best[res.indices] = np.maximum(best[res.indices], np.clip(res.similarities, 0.0, None))
        factor[res.indices] = 1.0 + boost * best[res.indices]
    w = weights.weights * factor
    z = w.sum()
    return SampleWeights(w / z, weights.normalization * z)


def export_weights(path, ids, weights: SampleWeights) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "weight"])
        for i, w in zip(ids, weights.weights):
            wr.writerow([i, repr(float(w))])


def read_weights(path) -> dict[str, float]:
    with open(path, newline="") as f:
        return {row["id"]: float(row["weight"]) for row in csv.DictReader(f)}


def curate(records, k: int = 8, depth: int = 2, gamma_visual: float = 1.0, gamma_text: float = 1.0,
           threshold: float = DEFECT_THRESHOLD, seed: int = 0, area_grid=None) -> SampleWeights:
    """Cluster image embeddings, score captions, and combine into sampling weights."""
    emb = np.stack([r.image_emb for r in records])
    clusters = hierarchical_cluster(emb, k=k, depth=depth, seed=seed)
    index = tfidf_rarity([r.caption for r in records])
    areas = [defect_area(r, area_grid) for r in records]
    return dual_axis_weights(clusters, index, gamma_visual, gamma_text, areas, threshold)
