"""Deterministic synthetic corpus: coloured shapes and bitmap glyph text on small canvases.

Every record is a pure function of ``(seed, index)``. Captions follow the template
``a {color} {shape} at {region}[ with text '{glyph}']`` and can be parsed back.
Defect boxes are drawn as checkerboard patches, snapped to the pixel grid.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curation import CorpusRecord, write_manifest

BUCKETS = [(32, 32), (48, 48), (64, 64), (32, 64), (64, 32)]
SHAPES = ("square", "circle", "triangle", "glyph")
COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "magenta": (0.9, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}
REGIONS = [
    ["top left", "top", "top right"],
    ["left", "center", "right"],
    ["bottom left", "bottom", "bottom right"],
]
GLYPH_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"

# 3x5 bitmap font: five rows per character, '#' = ink
_FONT = {
    "A": (".#.", "#.#", "###", "#.#", "#.#"), "B": ("##.", "#.#", "##.", "#.#", "##."),
    "C": (".##", "#..", "#..", "#..", ".##"), "D": ("##.", "#.#", "#.#", "#.#", "##."),
    "E": ("###", "#..", "##.", "#..", "###"), "F": ("###", "#..", "##.", "#..", "#.."),
    "G": (".##", "#..", "#.#", "#.#", ".##"), "H": ("#.#", "#.#", "###", "#.#", "#.#"),
    "I": ("###", ".#.", ".#.", ".#.", "###"), "J": ("..#", "..#", "..#", "#.#", ".#."),
    "K": ("#.#", "#.#", "##.", "#.#", "#.#"), "L": ("#..", "#..", "#..", "#..", "###"),
    "M": ("#.#", "###", "###", "#.#", "#.#"), "N": ("##.", "#.#", "#.#", "#.#", "#.#"),
    "O": (".#.", "#.#", "#.#", "#.#", ".#."), "P": ("##.", "#.#", "##.", "#..", "#.."),
    "Q": (".#.", "#.#", "#.#", "##.", ".##"), "R": ("##.", "#.#", "##.", "#.#", "#.#"),
    "S": (".##", "#..", ".#.", "..#", "##."), "T": ("###", ".#.", ".#.", ".#.", ".#."),
    "U": ("#.#", "#.#", "#.#", "#.#", "###"), "V": ("#.#", "#.#", "#.#", "#.#", ".#."),
    "W": ("#.#", "#.#", "###", "###", "#.#"), "X": ("#.#", "#.#", ".#.", "#.#", "#.#"),
    "Y": ("#.#", "#.#", ".#.", ".#.", ".#."), "Z": ("###", "..#", ".#.", "#..", "###"),
    "0": ("###", "#.#", "#.#", "#.#", "###"), "1": (".#.", "##.", ".#.", ".#.", "###"),
    "2": ("##.", "..#", ".#.", "#..", "###"), "3": ("##.", "..#", ".#.", "..#", "##."),
    "4": ("#.#", "#.#", "###", "..#", "..#"), "5": ("###", "#..", "##.", "..#", "##."),
    "6": (".##", "#..", "###", "#.#", "###"), "7": ("###", "..#", ".#.", ".#.", ".#."),
    "8": ("###", "#.#", "###", "#.#", "###"), "9": ("###", "#.#", "###", "..#", "##."),
}


def _glyph_bitmap(ch: str) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in _FONT[ch]])


@dataclass
class ShapeSpec:
    type: str
    color: str
    center: tuple[float, float]  # (x, y) relative
    size: float  # relative to the shorter canvas side

    @property
    def region(self) -> str:
        cx, cy = self.center
        return REGIONS[min(int(cy * 3), 2)][min(int(cx * 3), 2)]


@dataclass
class SceneSpec:
    seed: int
    canvas: tuple[int, int]  # (h, w)
    shapes: list[ShapeSpec]
    glyph: str = ""
    defect_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.glyph) > 8:
            raise ValueError("glyph text is limited to 8 characters")
        for s in self.shapes:
            if s.type not in SHAPES or s.color not in COLORS:
                raise ValueError(f"unknown shape/color {s.type}/{s.color}")
            if s.type == "glyph" and not self.glyph:
                raise ValueError("a glyph shape needs glyph text")

    @property
    def caption(self) -> str:
        parts = [f"a {s.color} {s.type} at {s.region}" for s in self.shapes]
        text = " and ".join(parts)
        if self.glyph:
            text += f" with text '{self.glyph}'"
        return text


def parse_caption(caption: str) -> dict:
    """Recover shape, colour, region and glyph fields from a generated caption."""
    glyph = ""
    m = re.search(r" with text '([^']*)'$", caption)
    if m:
        glyph = m.group(1)
        caption = caption[: m.start()]
    shapes = []
    for part in caption.split(" and "):
        mm = re.fullmatch(r"a (\w+) (\w+) at ([a-z ]+)", part)
        if not mm:
            raise ValueError(f"not a generated caption: {part!r}")
        shapes.append({"color": mm.group(1), "type": mm.group(2), "region": mm.group(3)})
    return {"shapes": shapes, "glyph": glyph}


def _draw_text(img, text, x0, y0, color, scale=1):
    h, w, _ = img.shape
    for i, ch in enumerate(text):
        bm = np.kron(_glyph_bitmap(ch), np.ones((scale, scale), dtype=bool))
        ox = x0 + i * 4 * scale
        for dy, dx in zip(*np.nonzero(bm)):
            y, x = y0 + dy, ox + dx
            if 0 <= y < h and 0 <= x < w:
                img[y, x] = color


def render(spec: SceneSpec):
    """Rasterise ``spec`` into an (h, w, 3) float32 image in [-1, 1]."""
    h, w = spec.canvas
    img = np.full((h, w, 3), 0.05, dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = (xx + 0.5) / w, (yy + 0.5) / h
    side = min(h, w)
    for s in spec.shapes:
        cx, cy = s.center
        r = s.size * side / 2
        dx, dy = (px - cx) * w, (py - cy) * h
        color = np.array(COLORS[s.color], dtype=np.float32)
        if s.type == "square":
            inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        elif s.type == "circle":
            inside = dx**2 + dy**2 <= r**2
        elif s.type == "triangle":
            inside = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
        else:
            inside = None
            scale = 2 if len(spec.glyph) * 8 <= w else 1
            tw = len(spec.glyph) * 4 * scale
            x0 = int(np.clip(round(cx * w - tw / 2), 0, max(w - tw, 0)))
            y0 = int(np.clip(round(cy * h - 2.5 * scale), 0, h - 5 * scale))
            _draw_text(img, spec.glyph, x0, y0, color, scale)
        if inside is not None:
            img[inside] = color
    if spec.glyph and not any(s.type == "glyph" for s in spec.shapes):
        tw = len(spec.glyph) * 4
        _draw_text(img, spec.glyph, max((w - tw) // 2, 0), h - 6, np.float32([1, 1, 1]))
    for x, y, bw, bh in spec.defect_boxes:
        r0, r1 = int(round(y * h)), int(round((y + bh) * h))
        c0, c1 = int(round(x * w)), int(round((x + bw) * w))
        checker = ((yy[r0:r1, c0:c1] // 2 + xx[r0:r1, c0:c1] // 2) % 2).astype(np.float32)
        img[r0:r1, c0:c1] = checker[..., None]
    return img * 2.0 - 1.0, spec.caption, list(spec.defect_boxes)


def sample_defect_box(rng: np.random.Generator, canvas, area_range=(0.05, 0.5)):
    """One box of area ~ U(area_range), snapped to whole pixels."""
    h, w = canvas
    area = rng.uniform(*area_range)
    bw = rng.uniform(area, 1.0)
    bh = area / bw
    pw = int(np.clip(round(bw * w), 1, w))
    ph = int(np.clip(round(area * h * w / pw), 1, h))
    x = int(rng.integers(0, w - pw + 1))
    y = int(rng.integers(0, h - ph + 1))
    return (x / w, y / h, pw / w, ph / h)


def sample_scene(seed: int, defect: bool = False, rng_key: int = 0) -> SceneSpec:
    rng = np.random.default_rng([seed, rng_key])
    canvas = BUCKETS[rng.integers(len(BUCKETS))]
    shape_type = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    n_glyph = int(rng.integers(1, 9)) if shape_type == "glyph" or rng.random() < 0.3 else 0
    glyph = "".join(GLYPH_ALPHABET[i] for i in rng.integers(len(GLYPH_ALPHABET), size=n_glyph))
    size = float(rng.uniform(0.25, 0.5))
    lo, hi = size / 2, 1 - size / 2
    center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    boxes = [sample_defect_box(rng, canvas)] if defect else []
    return SceneSpec(seed, canvas, [ShapeSpec(shape_type, color, center, size)], glyph, boxes)


# --- toy embedders ---------------------------------------------------------


def text_embedding(text: str, dim: int = 64, n: int = 3) -> np.ndarray:
    """Hashed bag of character n-grams, L2-normalised."""
    v = np.zeros(dim)
    padded = f" {text.lower()} "
    for i in range(len(padded) - n + 1):
        digest = hashlib.blake2b(padded[i:i + n].encode(), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        v[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    norm = np.linalg.norm(v)
    if norm == 0:
        v[0] = 1.0
        return v
    return v / norm


def downsample(img: np.ndarray, size: int = 8) -> np.ndarray:
    """Block-average to (size, size, ch) by nearest index bins."""
    h, w, ch = img.shape
    rb = np.minimum((np.arange(h) * size) // h, size - 1)
    cb = np.minimum((np.arange(w) * size) // w, size - 1)
    out = np.zeros((size, size, ch))
    cnt = np.zeros((size, size, 1))
    np.add.at(out, (rb[:, None], cb[None, :]), img)
    np.add.at(cnt, (rb[:, None], cb[None, :]), 1.0)
    return out / cnt


class PixelPCAEmbedder:
    """PCA over downsampled pixels; components fitted on the corpus itself."""

    def __init__(self, dim: int = 64, size: int = 8):
        self.dim, self.size = dim, size
        self.mean = None
        self.components = None

    def fit(self, images) -> "PixelPCAEmbedder":
        return self.fit_features(np.stack([downsample(im, self.size).ravel() for im in images]))

    def fit_features(self, x: np.ndarray) -> "PixelPCAEmbedder":
        self.mean = x.mean(0)
        _, _, vt = np.linalg.svd(x - self.mean, full_matrices=False)
        # deterministic sign: largest-magnitude loading positive
        signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(1)])
        signs[signs == 0] = 1.0
        self.components = (vt * signs[:, None])[: self.dim]
        return self

    def transform_features(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.mean) @ self.components.T
        out = np.zeros((len(z), self.dim))
        out[:, : z.shape[1]] = z
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        zero = norms[:, 0] < 1e-12
        out[zero, 0] = 1.0
        norms[zero] = 1.0
        return out / norms


def make_corpus(n: int, seed: int, defect_rate: float, out_dir=None, emb_dim: int = 64):
    """Generate ``n`` records; when ``out_dir`` is given also write images and manifest.

    Images are stored as raw little-endian float32 (h, w, 3) files under
    ``out_dir/images``; the manifest is ``out_dir/manifest.jsonl``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= defect_rate <= 1.0:
        raise ValueError(f"defect_rate must lie in [0, 1], got {defect_rate}")
    rng = np.random.default_rng(seed)
    defective = rng.random(n) < defect_rate
    feats, specs, images = [], [], []
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        spec = sample_scene(seed, bool(defective[i]), rng_key=i)
        img, _, _ = render(spec)
        feats.append(downsample(img).ravel())
        specs.append(spec)
        if out_dir is not None:
            img.astype("<f4").tofile(out_dir / "images" / f"{i:06d}.f32")
    x = np.stack(feats)
    img_emb = PixelPCAEmbedder(emb_dim).fit_features(x).transform_features(x)
    records = [
        CorpusRecord(
            id=f"{i:06d}",
            image=f"images/{i:06d}.f32",
            caption=spec.caption,
            image_emb=img_emb[i],
            text_emb=text_embedding(spec.caption, emb_dim),
            defect_boxes=spec.defect_boxes,
            height=spec.canvas[0],
            width=spec.canvas[1],
        )
        for i, spec in enumerate(specs)
    ]
    if out_dir is not None:
        write_manifest(out_dir / "manifest.jsonl", records)
    return records


def load_image(manifest_dir, record: CorpusRecord) -> np.ndarray:
    path = Path(manifest_dir) / record.image
    return np.fromfile(path, dtype="<f4").reshape(record.height, record.width, 3)
