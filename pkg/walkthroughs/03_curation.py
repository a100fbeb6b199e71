"""Dual-axis resampling of a generated corpus.

Visual axis: hierarchical k-means over image embeddings, each leaf down-weighted
by its size. Text axis: TF-IDF rarity of the caption. Records whose defect area
reaches 20% are dropped; smaller defects stay and are masked out of the loss.
"""

from collections import Counter

import numpy as np

from mmflow.curation import (cross_modal_retrieve, defect_area, dual_axis_weights, hierarchical_cluster,
                             tfidf_rarity)
from mmflow.toydata import make_corpus, text_embedding

records = make_corpus(600, seed=0, defect_rate=0.3)
emb = np.stack([r.image_emb for r in records])
clusters = hierarchical_cluster(emb, k=4, depth=2, seed=0)
index = tfidf_rarity([r.caption for r in records])
areas = [defect_area(r) for r in records]
weights = dual_axis_weights(clusters, index, gamma_visual=1.0, gamma_text=1.0, defect_areas=areas)

leaf = clusters.leaf_ids()
draws = weights.draw(50_000, np.random.default_rng(0))
raw, resampled = Counter(leaf.tolist()), Counter(leaf[draws].tolist())
print("leaf  raw share  resampled share")
for c in sorted(raw):
    print(f"{c:>4}  {raw[c] / len(leaf):9.3f}  {resampled[c] / len(draws):15.3f}")

dropped = sum(a >= 0.2 for a in areas)
masked = sum(0 < a < 0.2 for a in areas)
print(f"defective records: {dropped} dropped (area >= 0.2), {masked} kept with masked cells")

most, least = np.argmax(index.rarity), np.argmin(index.rarity)
print(f"rarest caption:  {records[most].caption!r}")
print(f"commonest caption: {records[least].caption!r}")

query = text_embedding("a blue star", 64)
hits = cross_modal_retrieve(query, np.stack([r.text_emb for r in records]), k=3, ids=[r.id for r in records])
for rid, sim in zip(hits.ids, hits.similarities):
    print(f"retrieved {rid} sim={sim:.3f} {records[int(rid)].caption!r}")
