import numpy as np
import pytest

from kvdit.backbone import (
    Model,
    ModelConfig,
    patchify,
    resize_model,
    resize_positional_embedding,
    retrofit_compression,
    unpatchify,
)
from kvdit.errors import ConfigError, DimensionError, LayoutError
from kvdit.kvattn import CompressionSpec, TokenGrid, compress_tokens, conv_param_count
from kvdit.numerics import Rng, Tensor, layernorm
from kvdit.numerics.tensor import no_grad


def small_config(**kw):
    base = dict(
        depth=2, channels=16, heads=2, patch_size=2, base_grid=(4, 4),
        cond_dim=16, time_embed_dim=16,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_batch(cfg, b=2, seed=0):
    h, w = cfg.image_size
    x = Rng(seed).child("x").normal((b, h, w, cfg.in_channels))
    t = Rng(seed).child("t").integers(1, 100, size=b)
    labels = Rng(seed).child("lab").integers(0, cfg.cond_vocab, size=(b, cfg.cond_tokens))
    return x, t, labels


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------
def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(channels=10, heads=4)


def test_config_rejects_overlapping_compression():
    specs = [
        CompressionSpec(operator="pool", stride=2, layer_range=(1, 4)),
        CompressionSpec(operator="conv", stride=2, layer_range=(4, 8)),
    ]
    with pytest.raises(ConfigError):
        ModelConfig(compression=specs)


def test_config_rejects_out_of_depth_range():
    with pytest.raises(ConfigError):
        ModelConfig(depth=4, compression=[
            CompressionSpec(operator="pool", stride=2, layer_range=(3, 5))
        ])


def test_config_dict_roundtrip():
    cfg = small_config(compression=[
        CompressionSpec(operator="conv", stride=2, layer_range=(2, 2), pool_mode="nearest")
    ])
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


# ----------------------------------------------------------------------
# patchify / unpatchify
# ----------------------------------------------------------------------
def test_patchify_roundtrip_identity():
    img = Tensor(Rng(1).normal((2, 8, 8, 3)))
    grid = patchify(img, 2)
    assert (grid.height, grid.width, grid.data.shape[2]) == (4, 4, 12)
    back = unpatchify(grid, 2, 3)
    np.testing.assert_array_equal(back.data, img.data)


def test_patchify_preserves_spatial_layout():
    # token (i, j) must contain exactly the pixels of patch (i, j)
    img = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    grid = patchify(Tensor(img), 2)
    tok = grid.data.data.reshape(1, 2, 2, 4)
    np.testing.assert_array_equal(tok[0, 0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tok[0, 1, 1], [10, 11, 14, 15])


def test_patchify_rejects_indivisible():
    with pytest.raises(LayoutError):
        patchify(Tensor(np.zeros((1, 5, 4, 3))), 2)


def test_unpatchify_rejects_wrong_dim():
    grid = TokenGrid(Tensor(np.zeros((1, 4, 10))), 2, 2)
    with pytest.raises(DimensionError):
        unpatchify(grid, 2, 3)


# ----------------------------------------------------------------------
# model basics
# ----------------------------------------------------------------------
def test_fresh_model_predicts_exactly_zero():
    cfg = small_config()
    model = Model(cfg, Rng(2))
    x, t, labels = make_batch(cfg)
    with no_grad():
        out = model.forward(Tensor(x), t, labels)
    np.testing.assert_array_equal(out.data, 0.0)
    assert out.shape == x.shape


def test_forward_deterministic():
    cfg = small_config()
    model = Model(cfg, Rng(3))
    model.out_w.data[...] = Rng(4).normal(model.out_w.shape, scale=0.1)
    x, t, labels = make_batch(cfg)
    with no_grad():
        a = model.forward(Tensor(x), t, labels).data
        b = model.forward(Tensor(x), t, labels).data
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_bad_labels():
    cfg = small_config()
    model = Model(cfg, Rng(5))
    x, t, labels = make_batch(cfg)
    with pytest.raises(ConfigError):
        model.forward(Tensor(x), t, labels + cfg.cond_vocab)


def test_forward_rejects_wrong_grid():
    cfg = small_config()
    model = Model(cfg, Rng(6))
    bad = Rng(7).normal((1, 16, 16, 3))  # 8x8 patches != 4x4 PE
    t = np.array([1])
    labels = np.zeros((1, cfg.cond_tokens), dtype=np.int64)
    with pytest.raises(LayoutError):
        model.forward(Tensor(bad), t, labels)


def test_parameter_names_stable_and_loadable():
    cfg = small_config()
    m1 = Model(cfg, Rng(8))
    m2 = Model(cfg, Rng(9))
    params = {k: v.data.copy() for k, v in m1.parameters().items()}
    m2.load_parameters(params)
    for k, v in m2.parameters().items():
        np.testing.assert_array_equal(v.data, params[k])


def test_load_parameters_rejects_name_and_shape_mismatch():
    cfg = small_config()
    model = Model(cfg, Rng(10))
    params = {k: v.data.copy() for k, v in model.parameters().items()}
    bad = dict(params)
    bad.pop("pos_embed")
    with pytest.raises(ConfigError):
        model.load_parameters(bad)
    bad2 = dict(params)
    bad2["pos_embed"] = np.zeros((1, 1, 1))
    with pytest.raises(DimensionError):
        model.load_parameters(bad2)


def test_clone_is_independent():
    cfg = small_config()
    model = Model(cfg, Rng(11))
    twin = model.clone()
    model.patch_w.data += 1.0
    assert not np.array_equal(model.patch_w.data, twin.patch_w.data)


def test_compressed_model_probe_reports_score_shapes():
    cfg = small_config(compression=[
        CompressionSpec(operator="pool", stride=2, layer_range=(2, 2))
    ])
    model = Model(cfg, Rng(12))
    x, t, labels = make_batch(cfg)
    probe = {}
    with no_grad():
        model.forward(Tensor(x), t, labels, probe=probe)
    assert probe["block1.score_shape"] == (16, 16)  # dense layer
    assert probe["block2.score_shape"] == (16, 4)  # compressed layer


def test_param_count_grows_by_conv_overhead_only():
    cfg = small_config()
    base = Model(cfg, Rng(13)).param_count()
    spec = CompressionSpec(operator="conv", stride=2, layer_range=(1, 2))
    comp = Model(small_config(compression=[spec]), Rng(13)).param_count()
    assert comp - base == 2 * conv_param_count(cfg.channels, 2)


# ----------------------------------------------------------------------
# positional-embedding surgery
# ----------------------------------------------------------------------
def test_resize_pe_same_size_is_identity():
    pe = Tensor(Rng(14).normal((4, 4, 8)), requires_grad=True)
    out = resize_positional_embedding(pe, (4, 4))
    np.testing.assert_array_equal(out.data, pe.data)
    assert out.requires_grad


def test_resize_model_interpolate_keeps_all_other_weights():
    cfg = small_config()
    model = Model(cfg, Rng(15))
    hr = resize_model(model, (8, 8), "interpolate", Rng(16))
    assert hr.config.base_grid == (8, 8)
    old = model.parameters()
    new = hr.parameters()
    for name in old:
        if name == "pos_embed":
            continue
        np.testing.assert_array_equal(new[name].data, old[name].data)
    np.testing.assert_allclose(
        hr.pos_embed.data,
        resize_positional_embedding(model.pos_embed, (8, 8)).data,
        atol=0,
    )


def test_resize_model_random_pe_differs():
    cfg = small_config()
    model = Model(cfg, Rng(17))
    interp = resize_model(model, (8, 8), "interpolate", Rng(18))
    rand = resize_model(model, (8, 8), "random", Rng(18))
    assert not np.allclose(interp.pos_embed.data, rand.pos_embed.data)


def test_resize_model_rejects_shrinking_and_bad_mode():
    model = Model(small_config(), Rng(19))
    with pytest.raises(ConfigError):
        resize_model(model, (2, 2), "interpolate", Rng(20))
    with pytest.raises(ConfigError):
        resize_model(model, (8, 8), "nearest", Rng(20))


def test_resized_model_runs_at_new_resolution():
    cfg = small_config()
    model = Model(cfg, Rng(21))
    hr = resize_model(model, (8, 8), "interpolate", Rng(22))
    x = Rng(23).normal((1, 16, 16, cfg.in_channels))
    t = np.array([5])
    labels = np.zeros((1, cfg.cond_tokens), dtype=np.int64)
    with no_grad():
        out = hr.forward(Tensor(x), t, labels)
    assert out.shape == x.shape


# ----------------------------------------------------------------------
# compression retrofit
# ----------------------------------------------------------------------
def test_retrofit_copies_existing_weights_bitwise():
    cfg = small_config()
    model = Model(cfg, Rng(24))
    spec = CompressionSpec(operator="conv", stride=2, layer_range=(2, 2))
    fitted = retrofit_compression(model, spec, Rng(25), init="avg")
    old = model.parameters()
    new = fitted.parameters()
    for name in old:
        np.testing.assert_array_equal(new[name].data, old[name].data)
    added = set(new) - set(old)
    assert added == {
        "block2.attn.sr.kernel", "block2.attn.sr.bias",
        "block2.attn.sr.norm_gain", "block2.attn.sr.norm_bias",
    }


def test_retrofit_avg_init_compressed_k_equals_layernormed_pooling():
    cfg = small_config()
    model = Model(cfg, Rng(26))
    spec = CompressionSpec(operator="conv", stride=2, layer_range=(1, 1))
    fitted = retrofit_compression(model, spec, Rng(27), init="avg")
    x, t, labels = make_batch(cfg)
    probe = {}
    with no_grad():
        fitted.forward(Tensor(x), t, labels, probe=probe)
        # recompute the expected compressed K by mean pooling + layernorm
        probe_dense = {}
        model.forward(Tensor(x), t, labels, probe=probe_dense)
    k_dense = probe_dense["block1.k_compressed"]  # uncompressed K
    pooled = compress_tokens(
        TokenGrid(Tensor(k_dense), 4, 4),
        CompressionSpec(operator="pool", stride=2, layer_range=(1, 1)),
    ).as_grid()
    w = fitted.blocks[0].attn
    with no_grad():
        expected = layernorm(pooled, w.norm_gain, w.norm_bias).data
    got = probe["block1.k_compressed"].reshape(expected.shape)
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_retrofit_rejects_non_conv_and_overlap():
    cfg = small_config(compression=[
        CompressionSpec(operator="pool", stride=2, layer_range=(1, 1))
    ])
    model = Model(cfg, Rng(28))
    with pytest.raises(ConfigError):
        retrofit_compression(
            model, CompressionSpec(operator="pool", stride=2, layer_range=(2, 2))
        )
    with pytest.raises(ConfigError):
        retrofit_compression(
            model, CompressionSpec(operator="conv", stride=2, layer_range=(1, 2))
        )


def test_retrofit_avg_vs_random_divergence_ordering():
    # a single-forward sanity version of the two-arm race
    cfg = small_config()
    model = Model(cfg, Rng(29))
    # give the base model a non-zero output so divergences are visible
    model.out_w.data[...] = Rng(30).normal(model.out_w.shape, scale=0.1)
    spec = CompressionSpec(operator="conv", stride=2, layer_range=(1, 2))
    avg = retrofit_compression(model, spec, Rng(31), init="avg")
    rand = retrofit_compression(model, spec, Rng(31), init="random")
    x, t, labels = make_batch(cfg)
    with no_grad():
        ref = model.forward(Tensor(x), t, labels).data
        d_avg = np.mean((avg.forward(Tensor(x), t, labels).data - ref) ** 2)
        d_rand = np.mean((rand.forward(Tensor(x), t, labels).data - ref) ** 2)
    assert d_avg < d_rand
