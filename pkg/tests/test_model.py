import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import perturb_, random_sample, tiny_config
from mmflow.errors import ConfigError, NumericFailure
from mmflow.model import (
    MMDiT,
    ModelConfig,
    SizeCondition,
    TextEncoder,
    assign_position_ids,
    image_to_latent,
    image_token_grid,
    latent_to_image,
    load_checkpoint,
    pack_samples,
    patchify,
    rope_rotate,
    save_checkpoint,
    unpatchify,
)
from mmflow.model.checkpoint import arrays_to_state, state_to_arrays
from mmflow.model.embeddings import sinusoidal, size_embedding, timestep_embedding
from mmflow.model.positions import rope_frequencies

# --- positions ---------------------------------------------------------------


def test_position_ids_worked_example():
    table = assign_position_ids(2, 3, 2)
    assert table.image_ids() == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert table.text_ids() == [(0, 3), (0, 4)]
    assert table.is_text.tolist() == [False] * 6 + [True] * 2


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 20))
def test_text_ids_continue_columns(r, c, length):
    table = assign_position_ids(r, c, length)
    assert table.text_ids() == [(0, c + i) for i in range(length)]
    assert len(table) == r * c + length
    assert len(set(map(tuple, table.as_array().tolist()))) == len(table)  # no collisions


@pytest.mark.parametrize("shape", [(0, 3), (3, 0), (-1, 2)])
def test_position_ids_reject_empty_grid(shape):
    with pytest.raises(ValueError):
        assign_position_ids(*shape, 4)


def test_rope_needs_head_dim_multiple_of_four():
    with pytest.raises(ConfigError):
        rope_frequencies(6)
    with pytest.raises(ConfigError):
        ModelConfig(hidden=24, heads=4)  # head_dim 6


def test_rope_preserves_norm(gen):
    x = torch.randn(10, 3, 16, generator=gen, dtype=torch.float64)
    pos = np.random.default_rng(0).integers(0, 50, size=(10, 2))
    y = rope_rotate(x, pos)
    torch.testing.assert_close(y.norm(dim=-1), x.norm(dim=-1))


def test_rope_zero_position_is_identity(gen):
    x = torch.randn(4, 2, 8, generator=gen, dtype=torch.float64)
    torch.testing.assert_close(rope_rotate(x, np.zeros((4, 2), int)), x)


def test_rope_halves_follow_their_axis(gen):
    """Moving only the row id must leave the column half of each head untouched."""
    x = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)
    a = rope_rotate(x, [[0, 5]])
    b = rope_rotate(x, [[7, 5]])
    torch.testing.assert_close(a[..., 8:], b[..., 8:])
    assert not torch.allclose(a[..., :8], b[..., :8])


def test_rope_logits_depend_on_offset_only(gen):
    q = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 1, 16, generator=gen, dtype=torch.float64)

    def logit(pq, pk):
        return (rope_rotate(q, [pq]) * rope_rotate(k, [pk])).sum().item()

    ref = logit((3, 4), (1, 9))
    assert logit((13, 24), (11, 29)) == pytest.approx(ref, abs=1e-10)
    assert logit((3, 5), (1, 9)) != pytest.approx(ref, abs=1e-6)


# --- packing -----------------------------------------------------------------


def test_patchify_roundtrip(gen):
    x = torch.randn(8, 12, 3, generator=gen)
    p = patchify(x, 2)
    assert p.shape == (4, 6, 12)
    torch.testing.assert_close(unpatchify(p, 2), x)
    with pytest.raises(ValueError):
        patchify(torch.zeros(5, 4, 3), 2)


def test_image_latent_roundtrip(gen):
    img = torch.rand(32, 64, 3, generator=gen) * 2 - 1
    torch.testing.assert_close(latent_to_image(image_to_latent(img)), img)
    grid = image_token_grid(img, ModelConfig())
    assert grid.shape == (8, 16) and grid.latent_patches.shape[-1] == 48


def test_pack_empty_raises():
    with pytest.raises(ValueError):
        pack_samples([])


def test_attention_mask_is_block_diagonal(gen):
    cfg = tiny_config()
    samples = [random_sample(cfg, 2, 3, 4, gen), random_sample(cfg, 1, 1, 2, gen)]
    batch = pack_samples(samples)
    mask = batch.attention_mask()
    assert batch.offsets.tolist() == [0, 10, 13]
    assert mask[:10, :10].all() and mask[10:, 10:].all()
    assert not mask[:10, 10:].any() and not mask[10:, :10].any()
    strict = batch.attention_mask(cross_modal=False)
    assert not strict[0, 6]  # image token 0 -> text token of the same sample
    assert strict[6, 7]


def test_split_images_inverts_packing(gen):
    cfg = tiny_config()
    samples = [random_sample(cfg, 2, 3, 4, gen), random_sample(cfg, 4, 1, 0, gen)]
    batch = pack_samples(samples)
    parts = batch.split_images(batch.image_tokens)
    for (grid, *_), part in zip(samples, parts):
        torch.testing.assert_close(part, grid.latent_patches)


def test_packed_forward_matches_single_forward(gen):
    cfg = tiny_config()
    model = perturb_(MMDiT(cfg).double(), seed=1)
    samples = [random_sample(cfg, r, c, n, gen, torch.float64)
               for r, c, n in [(2, 2, 3), (3, 5, 7), (1, 4, 1)]]
    v_packed, tap_packed = model(pack_samples(samples))
    ofs = pack_samples(samples).image_offsets
    for i, s in enumerate(samples):
        v_one, tap_one = model(pack_samples([s]))
        torch.testing.assert_close(v_packed[ofs[i]:ofs[i + 1]], v_one, atol=1e-12, rtol=0)
        torch.testing.assert_close(tap_packed[ofs[i]:ofs[i + 1]], tap_one, atol=1e-12, rtol=0)


# --- embeddings ----------------------------------------------------------------


def test_embedding_dims_must_be_even():
    with pytest.raises(ConfigError):
        sinusoidal(torch.tensor([0.5]), 7)
    with pytest.raises(ConfigError):
        size_embedding(SizeCondition(32, 32), 9)


def test_size_embedding_separates_height_and_width():
    a = size_embedding(SizeCondition(32, 64), 32)
    b = size_embedding(SizeCondition(64, 32), 32)
    torch.testing.assert_close(a[:16], b[16:])
    torch.testing.assert_close(a[16:], b[:16])
    assert not torch.allclose(a, b)


def test_timestep_embedding_shape_and_dtype():
    e = timestep_embedding(torch.tensor([0.0, 0.5, 1.0]), 16)
    assert e.shape == (3, 16) and e.dtype == torch.float32
    torch.testing.assert_close(e[0, :8], torch.ones(8))  # cos(0)


# --- transformer -----------------------------------------------------------------


def test_adaln_zero_output_starts_at_zero(gen):
    cfg = tiny_config()
    v, tap = MMDiT(cfg)(pack_samples([random_sample(cfg, 2, 2, 3, gen)]))
    assert v.shape == (4, cfg.token_dim) and tap.shape == (4, cfg.hidden)
    assert torch.count_nonzero(v) == 0


def test_text_influences_image_only_with_cross_modal(gen):
    cfg = tiny_config()
    model = perturb_(MMDiT(cfg), seed=2)
    grid, text, size, t = random_sample(cfg, 2, 2, 3, gen)
    other = type(text)(torch.randn(3, cfg.text_dim, generator=gen))
    a = model(pack_samples([(grid, text, size, t)]))[0]
    b = model(pack_samples([(grid, other, size, t)]))[0]
    assert not torch.allclose(a, b)
    a = model(pack_samples([(grid, text, size, t)]), cross_modal=False)[0]
    b = model(pack_samples([(grid, other, size, t)]), cross_modal=False)[0]
    torch.testing.assert_close(a, b)


def test_size_condition_changes_output(gen):
    cfg = tiny_config()
    model = perturb_(MMDiT(cfg), seed=3)
    grid, text, _, t = random_sample(cfg, 2, 2, 3, gen)
    a = model(pack_samples([(grid, text, SizeCondition(16, 16), t)]))[0]
    b = model(pack_samples([(grid, text, SizeCondition(64, 16), t)]))[0]
    assert not torch.allclose(a, b)


def test_nonfinite_activation_reports_layer(gen):
    cfg = tiny_config()
    model = perturb_(MMDiT(cfg), seed=4)
    grid, text, size, t = random_sample(cfg, 2, 2, 3, gen)
    grid.latent_patches[0, 0, 0] = float("nan")
    with pytest.raises(NumericFailure) as err:
        model(pack_samples([(grid, text, size, t)]))
    assert err.value.where == "layer 0"


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        ModelConfig(depth=2, tap_layer=2)
    assert ModelConfig(depth=6).tap_layer == 3


def test_text_encoder_handles_empty_and_wide_chars():
    cfg = tiny_config()
    enc = TextEncoder(cfg)
    assert len(enc("")) >= 0
    seq = enc("a é中")
    assert seq.token_embeddings.shape[-1] == cfg.text_dim


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(0, 5)), min_size=1, max_size=4))
def test_pack_offsets_property(shapes):
    cfg = tiny_config()
    g = torch.Generator().manual_seed(0)
    batch = pack_samples([random_sample(cfg, r, c, n, g) for r, c, n in shapes])
    lengths = [r * c + n for r, c, n in shapes]
    assert np.diff(batch.offsets).tolist() == lengths
    assert batch.is_text.sum() == sum(n for *_, n in shapes)
    assert batch.image_tokens.shape[0] == sum(r * c for r, c, _ in shapes)


# --- checkpoint ------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    cfg = tiny_config()
    model = perturb_(MMDiT(cfg), seed=5)
    arrays = state_to_arrays("m", model.state_dict())
    save_checkpoint(tmp_path / "c.zip", arrays, {"model": cfg.to_dict()})
    loaded, conf = load_checkpoint(tmp_path / "c.zip")
    assert conf["model"] == cfg.to_dict()
    fresh = MMDiT(ModelConfig(**conf["model"]))
    fresh.load_state_dict(arrays_to_state("m", loaded))
    for (k, a), (_, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_rejects_unknown_version(tmp_path):
    import zipfile

    save_checkpoint(tmp_path / "c.zip", {"x": np.zeros(2, np.float32)}, {})
    with zipfile.ZipFile(tmp_path / "c.zip") as src, zipfile.ZipFile(tmp_path / "d.zip", "w") as dst:
        for name in src.namelist():
            dst.writestr(name, b"99" if name == "FORMAT_VERSION" else src.read(name))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "d.zip")
