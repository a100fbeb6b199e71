import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmflow.curation import (
    ClusterAssignment,
    CorpusRecord,
    build_defect_mask,
    cross_modal_retrieve,
    curate,
    defect_area,
    dual_axis_weights,
    export_weights,
    hierarchical_cluster,
    kmeans,
    read_manifest,
    read_weights,
    retrieval_calibrate,
    tfidf_rarity,
    tokenize,
    write_manifest,
)
from oracles import retrieve_by_sort


def record(i, boxes=(), h=32, w=32, caption="a red square"):
    return CorpusRecord(f"{i:03d}", f"images/{i:03d}.f32", caption, np.ones(4), np.ones(4), list(boxes), h, w)


def two_blobs(n_a, n_b, seed=0, dim=8):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.1, (n_a, dim)) + 5
    b = rng.normal(0, 0.1, (n_b, dim)) - 5
    return np.concatenate([a, b])


# --- records and masks ---------------------------------------------------------


def test_record_rejects_box_outside_unit_square():
    with pytest.raises(ValueError):
        record(0, [(0.5, 0.5, 0.6, 0.1)])


def test_manifest_roundtrip(tmp_path):
    recs = [record(i, [(0.1, 0.1, 0.2, 0.3)] if i % 2 else []) for i in range(3)]
    write_manifest(tmp_path / "m.jsonl", recs)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]


def test_defect_mask_cell_centres():
    rec = record(0, [(0.0, 0.0, 0.5, 0.5)])
    m = build_defect_mask(rec, (4, 4))
    assert (~m.keep).sum() == 4 and not m.keep[:2, :2].any()
    assert m.area_fraction_defect == 0.25
    assert defect_area(rec) == 0.25


def test_defect_area_on_pixel_grid():
    rec = record(0, [(0.0, 0.0, 0.25, 0.75)], h=32, w=32)
    assert defect_area(rec) == pytest.approx(0.1875)
    assert defect_area(record(1)) == 0.0


# --- clustering ------------------------------------------------------------------


def test_kmeans_separates_blobs():
    x = two_blobs(30, 10)
    labels = kmeans(x, 2, np.random.default_rng(0))
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1 and labels[0] != labels[-1]


def test_kmeans_with_duplicates_never_returns_empty_ids():
    x = np.zeros((10, 3))
    x[5:] = 1.0
    labels = kmeans(x, 4, np.random.default_rng(0))
    assert np.array_equal(np.unique(labels), np.arange(labels.max() + 1))


def test_hierarchy_paths_and_small_nodes():
    x = np.concatenate([two_blobs(40, 0), two_blobs(0, 3) - 20])
    ca = hierarchical_cluster(x, k=4, depth=2, seed=0)
    assert ca.paths.shape == (43, 2)
    small = ca.paths[40:]
    assert len(set(small[:, 0])) == 1 and not np.isin(small[0, 0], ca.paths[:40, 0])
    assert np.all(small[:, 1] == 0)  # fewer than k members: not split further
    assert ca.leaf_sizes().sum() == 43


def test_hierarchy_is_seed_deterministic():
    x = np.random.default_rng(1).normal(size=(60, 5))
    a = hierarchical_cluster(x, 3, 2, seed=4).paths
    b = hierarchical_cluster(x, 3, 2, seed=4).paths
    assert np.array_equal(a, b)


# --- tf-idf ------------------------------------------------------------------------


def test_tokenize():
    assert tokenize("A Red-Circle, at TOP left!") == ["a", "red", "circle", "at", "top", "left"]


def test_tfidf_worked_values():
    idx = tfidf_rarity(["red circle", "red square", "blue square"])
    assert idx.idf("red") == pytest.approx(math.log(3 / 2))
    assert idx.idf("blue") == pytest.approx(math.log(3))
    # doc 2: tf 1/2 each; mean(0.5 ln 3, 0.5 ln 1.5)
    assert idx.rarity[2] == pytest.approx(0.25 * (math.log(3) + math.log(1.5)))


def test_ubiquitous_term_has_zero_idf():
    idx = tfidf_rarity(["the cat", "the dog", "the"])
    assert idx.idf("the") == 0.0
    assert idx.rarity[2] == 0.0


def test_duplicating_a_caption_does_not_raise_its_rarity():
    caps = ["a red circle", "a blue square", "a green star with text 'ab'"]
    before = tfidf_rarity(caps).rarity
    after = tfidf_rarity(caps + [caps[0]]).rarity
    assert after[0] <= before[0] + 1e-12


def test_empty_caption_rarity_zero():
    assert tfidf_rarity(["", "a b"]).rarity[0] == 0.0
    with pytest.raises(ValueError):
        tfidf_rarity([])


# --- weights ---------------------------------------------------------------------------


def test_cluster_balance_inverts_frequency():
    ca = ClusterAssignment(np.array([[0]] * 9 + [[1]]))
    w = dual_axis_weights(ca, tfidf_rarity(["x"] * 10), 1.0, 1.0).weights
    assert w[:9].sum() == pytest.approx(0.5) and w[9] == pytest.approx(0.5)
    flat = dual_axis_weights(ca, tfidf_rarity(["x"] * 10), 0.0, 0.0).weights
    np.testing.assert_allclose(flat, 0.1)


def test_rarity_axis_upweights_rare_captions():
    ca = ClusterAssignment(np.zeros((4, 1), int))
    w = dual_axis_weights(ca, tfidf_rarity(["a b", "a b", "a b", "a zebra"]), 1.0, 1.0).weights
    assert w[3] > w[0] and w[0] == w[1] == w[2]


def test_defect_gate_zeroes_weights():
    ca = ClusterAssignment(np.zeros((3, 1), int))
    w = dual_axis_weights(ca, tfidf_rarity(["a"] * 3), defect_areas=[0.19, 0.20, 0.21]).weights
    assert w.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        dual_axis_weights(ca, tfidf_rarity(["a"] * 3), defect_areas=[0.5, 0.5, 0.5])


def test_weights_export_roundtrip(tmp_path):
    ca = ClusterAssignment(np.array([[0], [0], [1]]))
    w = dual_axis_weights(ca, tfidf_rarity(["a", "b", "c"]))
    export_weights(tmp_path / "w.csv", ["x", "y", "z"], w)
    back = read_weights(tmp_path / "w.csv")
    assert list(back) == ["x", "y", "z"]
    np.testing.assert_array_equal(list(back.values()), w.weights)  # repr() keeps every bit


def test_curate_end_to_end():
    recs = [record(i, [(0, 0, 0.5, 0.5)] if i == 0 else [], caption=f"a shape {i % 3}") for i in range(12)]
    for i, r in enumerate(recs):
        r.image_emb = np.array([i % 2 * 10.0, 0, 0, 1.0])
    w = curate(recs, k=2, depth=1)
    assert w.weights[0] == 0.0 and w.weights.sum() == pytest.approx(1.0)


# --- retrieval ------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 40))
def test_retrieval_matches_sort_oracle(seed, n, k):
    rng = np.random.default_rng(seed)
    emb = rng.integers(-2, 3, size=(n, 4)).astype(float)  # small ints force ties
    emb[np.all(emb == 0, axis=1), 0] = 1.0
    q = rng.integers(-2, 3, size=4).astype(float)
    q[0] = q[0] or 1.0
    ids = [f"r{j:03d}" for j in rng.permutation(n)]
    res = cross_modal_retrieve(q, emb, k, ids)
    want_ids, want_sims = retrieve_by_sort(q, emb, k, ids)
    assert res.ids == want_ids
    np.testing.assert_allclose(res.similarities, want_sims, rtol=0, atol=1e-12)
    assert res.truncated == (k > n)


def test_calibration_boosts_retrieved():
    ca = ClusterAssignment(np.zeros((4, 1), int))
    base = dual_axis_weights(ca, tfidf_rarity(["a"] * 4))
    emb = np.eye(4)
    cal = retrieval_calibrate(base, [np.array([1.0, 0, 0, 0])], emb, boost=1.0, k=1)
    assert cal.weights[0] == pytest.approx(2 / 5) and cal.weights[1] == pytest.approx(1 / 5)
    same = retrieval_calibrate(base, [np.array([1.0, 0, 0, 0])], emb, boost=0.0, k=1)
    np.testing.assert_allclose(same.weights, base.weights)
    with pytest.raises(ValueError):
        retrieval_calibrate(base, [], emb, boost=-1.0)
