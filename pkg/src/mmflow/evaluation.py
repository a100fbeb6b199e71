"""Reward scoring, text-rendering metrics and Elo arena aggregation."""

from __future__ import annotations

import csv
import json
import math
import unicodedata
from dataclasses import dataclass, field

import numpy as np

# --- generative reward -----------------------------------------------------


@dataclass
class RewardQuery:
    instruction: str
    features: np.ndarray | None
    yes_logit: float
    no_logit: float


def generative_reward(q) -> float:
    """Probability of "Yes" renormalised over the two answer tokens."""
    if isinstance(q, RewardQuery):
        yes, no = q.yes_logit, q.no_logit
    else:
        yes, no = q
    if not (math.isfinite(yes) and math.isfinite(no)):
        raise ValueError("reward logits must be finite")
    m = max(yes, no)
    ey, en = math.exp(yes - m), math.exp(no - m)
    return ey / (ey + en)


class YesNoRewardHead:
    """Stand-in reward model: linear two-logit head over candidate features.

    Trained on preference pairs by maximising log sigmoid(gap_w - gap_l), where
    gap = yes_logit - no_logit; the reward is then ``generative_reward``.
    """

    def __init__(self, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0, 0.01, size=(2, dim))
        self.b = np.zeros(2)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.W.T + self.b

    def query(self, features, instruction: str = "Does the image match the prompt?") -> RewardQuery:
        yes, no = self.logits(features)
        return RewardQuery(instruction, np.asarray(features), float(yes), float(no))

    def score(self, features) -> float:
        return generative_reward(self.query(features))

    def fit(self, winners: np.ndarray, losers: np.ndarray, lr: float = 0.5, steps: int = 300):
        diff = np.asarray(winners) - np.asarray(losers)
        u = self.W[0] - self.W[1]
        for _ in range(steps):
            s = 1.0 / (1.0 + np.exp(diff @ u))  # = 1 - sigmoid(margin)
            u += lr * (diff * s[:, None]).mean(0)
        # split the direction symmetrically across the two logits
        self.W = np.stack([u / 2, -u / 2])
        return self


# --- text rendering metrics ------------------------------------------------


def _prep(s: str, normalize: bool) -> list[str]:
    if normalize:
        s = unicodedata.normalize("NFKC", s).casefold()
    return list(s)  # unicode scalar values


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if ca == cb else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _dp_codes(A: np.ndarray, B: np.ndarray, lcs: bool) -> np.ndarray:
    """Row-by-row DP over a batch of equal-length code arrays A (n, la), B (n, lb)."""
    n, la = A.shape
    lb = B.shape[1]
    dt = np.int16 if max(la, lb) < 2**15 - 1 else np.int64
    if lcs:
        prev = np.zeros((n, lb + 1), dtype=dt)
    else:
        prev = np.broadcast_to(np.arange(lb + 1, dtype=dt), (n, lb + 1)).copy()
    for i in range(1, la + 1):
        cur = np.empty_like(prev)
        cur[:, 0] = 0 if lcs else i
        ai = A[:, i - 1]
        for j in range(1, lb + 1):
            same = ai == B[:, j - 1]
            if lcs:
                cur[:, j] = np.where(same, prev[:, j - 1] + 1, np.maximum(prev[:, j], cur[:, j - 1]))
            else:
                cur[:, j] = np.minimum(np.minimum(prev[:, j], cur[:, j - 1]) + 1, prev[:, j - 1] + ~same)
        prev = cur
    return prev[:, lb].copy()


def edit_distance_codes(A, B) -> np.ndarray:
    """Levenshtein distances for a batch of integer-coded strings of one length pair."""
    return _dp_codes(np.asarray(A), np.asarray(B), lcs=False)


def lcs_length_codes(A, B) -> np.ndarray:
    return _dp_codes(np.asarray(A), np.asarray(B), lcs=True)


def _batched(kernel, targets, rendered, normalize):
    targets, rendered = list(targets), list(rendered)
    if len(targets) != len(rendered):
        raise ValueError("targets and rendered differ in length")
    a = [[ord(c) for c in _prep(s, normalize)] for s in targets]
    b = [[ord(c) for c in _prep(s, normalize)] for s in rendered]
    out = np.zeros(len(a), dtype=np.int64)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (x, y) in enumerate(zip(a, b)):
        groups.setdefault((len(x), len(y)), []).append(i)
    for (la, lb), idx in groups.items():
        A = np.array([a[i] for i in idx], dtype=np.int64).reshape(len(idx), la)
        B = np.array([b[i] for i in idx], dtype=np.int64).reshape(len(idx), lb)
        out[idx] = kernel(A, B)
    return out


def edit_distances(targets, rendered, normalize: bool = False) -> np.ndarray:
    """Vectorised ``edit_distance`` over aligned lists of strings."""
    return _batched(edit_distance_codes, targets, rendered, normalize)


def lcs_lengths(targets, rendered, normalize: bool = False) -> np.ndarray:
    return _batched(lcs_length_codes, targets, rendered, normalize)


def text_accuracy(target: str, rendered: str, normalize: bool = False) -> float:
    """R_a = max(0, 1 - N_e / N) * 100."""
    t, r = _prep(target, normalize), _prep(rendered, normalize)
    if not t:
        raise ValueError("empty target: accuracy undefined")
    return max(0.0, 1.0 - edit_distance(t, r) / len(t)) * 100.0


def text_hit_rate(target: str, rendered: str, normalize: bool = False) -> float:
    """R_h = N_c / N * 100 with N_c the longest-common-subsequence length."""
    t, r = _prep(target, normalize), _prep(rendered, normalize)
    if not t:
        raise ValueError("empty target: hit rate undefined")
    return lcs_length(t, r) / len(t) * 100.0


@dataclass
class TextEvalRecord:
    target: str
    rendered: str
    available: bool
    id: str = ""

    @property
    def n_chars(self) -> int:
        return len(self.target)


def availability(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    flags = [r.available if isinstance(r, TextEvalRecord) else bool(r) for r in records]
    return 100.0 * sum(flags) / len(flags)


def read_text_eval(path) -> list[TextEvalRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            if line.strip():
                d = json.loads(line)
                out.append(TextEvalRecord(d["target"], d["rendered"], bool(d.get("available", False)),
                                          str(d.get("id", i))))
    return out


def write_metrics(path, records, normalize: bool = False) -> list[tuple[str, float, float]]:
    records = list(records)
    targets = [r.target for r in records]
    rendered = [r.rendered for r in records]
    n = np.array([len(_prep(t, normalize)) for t in targets], dtype=np.float64)
    if np.any(n == 0):
        raise ValueError("empty target: metrics undefined")
    r_a = np.maximum(0.0, 1.0 - edit_distances(targets, rendered, normalize) / n) * 100.0
    r_h = lcs_lengths(targets, rendered, normalize) / n * 100.0
    rows = [(r.id, float(a), float(h)) for r, a, h in zip(records, r_a, r_h)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "R_a", "R_h"])
        for rid, ra, rh in rows:
            w.writerow([rid, f"{ra:.6f}", f"{rh:.6f}"])
    return rows


# --- Elo -------------------------------------------------------------------


@dataclass
class BattleRecord:
    model_a: str
    model_b: str
    winner: str  # "a", "b" or "draw"
    timestamp: float = 0.0

    @property
    def score_a(self) -> float:
        return {"a": 1.0, "b": 0.0, "draw": 0.5}[self.winner]


@dataclass
class EloTable:
    k: float = 32.0
    initial: float = 1000.0
    ratings: dict[str, float] = field(default_factory=dict)
    appearances: dict[str, int] = field(default_factory=dict)

    def register(self, *models: str):
        for m in models:
            self.ratings.setdefault(m, self.initial)
            self.appearances.setdefault(m, 0)

    def leaderboard(self) -> list[tuple[str, float, int]]:
        rows = [(m, r, self.appearances[m]) for m, r in self.ratings.items()]
        return sorted(rows, key=lambda x: (-x[1], -x[2], x[0]))


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def elo_update(table: EloTable, battle: BattleRecord, k: float | None = None) -> EloTable:
    """Apply one battle in place (and return the table)."""
    a, b = battle.model_a, battle.model_b
    for m in (a, b):
        if m not in table.ratings:
            raise KeyError(f"unknown model {m!r}")
    k = table.k if k is None else k
    ra, rb = table.ratings[a], table.ratings[b]
    delta = k * (battle.score_a - expected_score(ra, rb))
    table.ratings[a] = ra + delta
    table.ratings[b] = rb - delta
    table.appearances[a] += 1
    table.appearances[b] += 1
    return table


def parse_battle(d: dict) -> BattleRecord:
    w = d.get("winner")
    if d.get("draw") or w in (None, "draw"):
        winner = "draw"
    elif w in ("a", "model_a", d["model_a"]):
        winner = "a"
    elif w in ("b", "model_b", d["model_b"]):
        winner = "b"
    else:
        raise ValueError(f"winner {w!r} names neither participant")
    return BattleRecord(d["model_a"], d["model_b"], winner, float(d.get("timestamp", 0.0)))


def read_battles(path) -> list[BattleRecord]:
    with open(path, encoding="utf-8") as f:
        return [parse_battle(json.loads(line)) for line in f if line.strip()]


def arena_replay(battles, k: float = 32.0, initial: float = 1000.0, models=()) -> EloTable:
    """Fold ``elo_update`` over battles in the given (chronological) order."""
    table = EloTable(k=k, initial=initial)
    table.register(*models)
    for b in battles:
        table.register(b.model_a, b.model_b)
        elo_update(table, b)
    return table


def write_leaderboard(path, table: EloTable):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "rating", "appearances"])
        for m, r, n in table.leaderboard():
            w.writerow([m, f"{r:.6f}", n])
