import math
from dataclasses import replace

import numpy as np
import pytest
from gradpoint import EPSILON, MINI, MiniProblem, generic_params, swap
from hypothesis import given, settings
from hypothesis import strategies as st

from vidcount import autodiff as ad
from vidcount.matching import density_loss
from vidcount.model import (
    ModelConfig,
    ModelConfigError,
    affine_norm,
    backbone_forward,
    build_queries,
    decoder_forward,
    density_branch,
    encoder_forward,
    feed_forward,
    init_params,
    model_forward,
    multi_head_attention,
    prediction_heads,
    scaled_dot_attention,
    sine_positions,
    temporal_attention,
)

SMALL = ModelConfig(crop_size=32, downsample_factor=4, backbone_channels=(8, 16), token_dim=16,
                    density_feature_dim=16, encoder_layers=2, decoder_layers=2, attention_heads=4,
                    num_queries=16, frames=5)


def _clip(cfg, seed=0):
    return np.random.default_rng(seed).uniform(size=(cfg.frames, cfg.crop_size, cfg.crop_size, 3))


def _sample_indices(size, rng, k=6):
    return sorted(rng.choice(size, size=min(size, k), replace=False).tolist())


# --- configuration ---------------------------------------------------------------

def test_default_config_shapes():
    cfg = ModelConfig()
    assert cfg.feature_size == 8 and cfg.query_grid == 4 and cfg.reference_frame == 2


@pytest.mark.parametrize("kwargs", [
    {"crop_size": 60},
    {"num_queries": 15},
    {"attention_heads": 5},
    {"frames": 3, "reference_frame": 3},
    {"query_mode": "mul"},
    {"backbone_channels": (8, 8)},
    {"downsample_factor": 6, "crop_size": 60},
])
def test_invalid_configs(kwargs):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kwargs)


def test_config_dict_round_trip():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ModelConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_init_seeded():
    a, b, c = init_params(MINI, 3), init_params(MINI, 3), init_params(MINI, 4)
    assert a.names() == b.names()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.names())
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a.names())
    assert all(np.all(np.isfinite(t.data)) for t in a.tensors.values())
    assert all(np.all(a[k].data == 0) for k in a.names() if k.endswith(".b") and "ln" not in k)


# --- backbone and density --------------------------------------------------------

def test_backbone_shape_default():
    cfg = ModelConfig(frames=2)
    params = init_params(cfg)
    with ad.no_grad():
        f = backbone_forward(_clip(cfg), params)
    assert f.shape == (2, cfg.token_dim, 8, 8)


def test_shared_backbone_identical_frames():
    params = init_params(SMALL)
    clip = _clip(SMALL)
    clip[1] = clip[3]
    with ad.no_grad():
        f = backbone_forward(clip, params).data
        swapped = clip[[0, 3, 2, 1, 4]]
        g = backbone_forward(swapped, params).data
    assert np.array_equal(f[1], f[3])
    assert np.array_equal(f, g)


def test_backbone_rejects_bad_frames():
    with pytest.raises(ad.ShapeError):
        backbone_forward(np.zeros((2, 15, 16, 3)), init_params(MINI))


def test_backbone_kernel_gradient():
    params = init_params(MINI, 1)
    clip = _clip(MINI, 1)
    rng = np.random.default_rng(0)
    for name in ("backbone.0.w", "backbone.1.w", "backbone.proj.w"):
        def f(x, name=name):
            return ad.sum(backbone_forward(clip, swap(params, name, x))[0])
        err = ad.finite_difference_check(f, params[name].data, EPSILON,
                                         _sample_indices(params[name].data.size, rng, 12))
        assert err < 1e-4, name


def test_density_shape_and_sign():
    params = init_params(SMALL, 2)
    with ad.no_grad():
        feats = backbone_forward(_clip(SMALL, 5) * 4 - 2, params)
        f, dens = density_branch(feats, params)
    assert f.shape == (5, SMALL.density_feature_dim, 8, 8)
    assert dens.shape == (5, 32, 32)
    assert np.all(dens.data >= 0)


def test_density_loss_gradient():
    params = init_params(MINI, 2)
    feats = ad.Tensor(np.random.default_rng(1).normal(size=(2, 8, 4, 4)))
    target = np.random.default_rng(2).uniform(0, 0.1, size=(2, 16, 16))
    rng = np.random.default_rng(3)
    for name in ("density.conv1.w", "density.conv2.w", "density.head.w", "density.head.b"):
        def f(x, name=name):
            return density_loss(density_branch(feats, swap(params, name, x))[1], target)
        err = ad.finite_difference_check(f, params[name].data, EPSILON,
                                         _sample_indices(params[name].data.size, rng, 10))
        assert err < 1e-4, name


# --- attention primitives -----------------------------------------------------------

def test_attention_fixture():
    log = []
    out = scaled_dot_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], log)
    a = 1 / math.sqrt(2)
    expect = [math.exp(a) / (math.exp(a) + 1), 1 / (math.exp(a) + 1)]
    np.testing.assert_allclose(log[0], [expect], atol=1e-12)
    np.testing.assert_allclose(out.data, [[0.6698, 0.3302]], atol=1e-3)


def test_attention_single_key():
    q = np.random.default_rng(0).normal(size=(3, 4))
    out = scaled_dot_attention(q, [[0.3, -1, 2, 0]], [[7.0, 8.0]])
    np.testing.assert_allclose(out.data, [[7.0, 8.0]] * 3, atol=1e-15)


def test_attention_equal_logits_mean():
    out = scaled_dot_attention([[0.0, 0.0]], [[1.0, 2.0], [3.0, 4.0]], [[1.0, 5.0], [3.0, -1.0]])
    np.testing.assert_allclose(out.data, [[2.0, 2.0]])


def test_attention_shape_errors():
    with pytest.raises(ad.ShapeError):
        scaled_dot_attention(np.zeros((1, 2)), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ad.ShapeError):
        scaled_dot_attention(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


# --- temporal attention -------------------------------------------------------------

def test_temporal_single_frame_is_value_projection():
    cfg = replace(MINI, frames=1, reference_frame=0)
    params = init_params(cfg, 4)
    feats = ad.Tensor(np.random.default_rng(0).normal(size=(1, 8, 4, 4)))
    with ad.no_grad():
        out = temporal_attention(feats, 0, params).data
    tokens = feats.data.reshape(8, 16).T + params["temporal.pos"].data[0]
    expect = tokens @ params["temporal.wv"].data + params["temporal.bv"].data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_temporal_shape_and_flow_from_every_frame():
    params = init_params(SMALL, 0)
    feats = ad.Tensor(np.random.default_rng(1).normal(size=(5, 16, 8, 8)), requires_grad=True)
    with ad.Tape():
        out = temporal_attention(feats, 2, params)
        assert out.shape == (64, 16)
        grads = ad.backpropagate(ad.sum(ad.square(out)))
    g = grads[feats]
    for t in range(5):
        assert np.abs(g[t]).max() > 0


def test_temporal_gradient():
    params = init_params(MINI, 5)
    feats = np.random.default_rng(2).normal(size=(2, 8, 4, 4))
    rng = np.random.default_rng(4)
    err = ad.finite_difference_check(lambda x: ad.sum(ad.square(temporal_attention(x, 1, params))),
                                     feats, EPSILON)
    assert err < 1e-4
    for name in ("temporal.pos", "temporal.wq", "temporal.wk", "temporal.wv"):
        def f(x, name=name):
            return ad.sum(ad.square(temporal_attention(ad.Tensor(feats), 1, swap(params, name, x))))
        assert ad.finite_difference_check(f, params[name].data, EPSILON,
                                          _sample_indices(params[name].data.size, rng, 8)) < 1e-4


# --- encoder --------------------------------------------------------------------------

def test_encoder_zero_injection_single_layer():
    cfg = replace(SMALL, encoder_layers=1)
    params = init_params(cfg, 6)
    rng = np.random.default_rng(0)
    tokens = ad.Tensor(rng.normal(size=(64, 16)))
    ta = ad.Tensor(np.zeros((64, 16)))
    params.tensors["encoder.inject.b"] = ad.Tensor(np.zeros(16))
    with ad.no_grad():
        out = encoder_forward(tokens, ta, params).data
        x = affine_norm(tokens, params, "encoder.0.ln1")
        f0 = multi_head_attention(x, x, x, params, "encoder.0.attn", cfg.attention_heads)
        expect = f0 + feed_forward(affine_norm(f0, params, "encoder.0.ln2"), params, "encoder.0.ffn")
    assert out.shape == (64, 16)
    np.testing.assert_allclose(out, expect.data, atol=1e-12)


def test_encoder_injection_matters():
    params = init_params(SMALL, 6)
    rng = np.random.default_rng(0)
    tokens = ad.Tensor(rng.normal(size=(64, 16)))
    with ad.no_grad():
        a = encoder_forward(tokens, ad.Tensor(np.zeros((64, 16))), params).data
        b = encoder_forward(tokens, ad.Tensor(rng.normal(size=(64, 16))), params).data
    assert np.abs(a - b).max() > 1e-3


def test_encoder_gradient_four_by_four():
    params = generic_params()
    rng = np.random.default_rng(8)
    tokens = rng.normal(size=(16, 8))
    ta = rng.normal(size=(16, 8))
    assert ad.finite_difference_check(lambda x: ad.sum(ad.square(encoder_forward(x, ad.Tensor(ta), params))),
                                      tokens, EPSILON) < 1e-4
    assert ad.finite_difference_check(lambda x: ad.sum(ad.square(encoder_forward(ad.Tensor(tokens), x, params))),
                                      ta, EPSILON) < 1e-4
    for name in [n for n in params.names() if n.startswith("encoder.")]:
        def f(x, name=name):
            return ad.sum(ad.square(encoder_forward(ad.Tensor(tokens), ad.Tensor(ta), swap(params, name, x))))
        assert ad.finite_difference_check(f, params[name].data, EPSILON,
                                          _sample_indices(params[name].data.size, rng, 4)) < 1e-4, name


# --- queries ----------------------------------------------------------------------------

def test_add_mode_zero_tokens_gives_embeddings():
    params = init_params(replace(SMALL, query_mode="add"), 1)
    params.tensors["queries.conv.b"] = ad.Tensor(np.zeros(16))
    with ad.no_grad():
        q = build_queries(ad.Tensor(np.zeros((64, 16))), params).data
    np.testing.assert_array_equal(q, params["queries.embed"].data)


def test_query_modes_shape_and_differ():
    params = init_params(replace(SMALL, query_mode="concat"), 1)
    ta = ad.Tensor(np.random.default_rng(0).normal(size=(64, 16)))
    with ad.no_grad():
        qa = build_queries(ta, params, "add").data
        qc = build_queries(ta, params, "concat").data
    assert qa.shape == qc.shape == (16, 16)
    assert np.abs(qa - qc).max() > 0


def test_query_tokens_come_from_strided_patches():
    # each query token only sees its own (h'/g)x(h'/g) block of density tokens
    params = init_params(replace(SMALL, query_mode="add"), 1)
    ta = np.random.default_rng(0).normal(size=(64, 16))
    with ad.no_grad():
        base = build_queries(ad.Tensor(ta), params).data
        bumped = ta.copy()
        bumped[0] += 1.0                          # grid cell (0, 0) -> query 0
        moved = build_queries(ad.Tensor(bumped), params).data
    changed = np.flatnonzero(np.abs(moved - base).max(axis=1) > 0)
    assert changed.tolist() == [0]


def test_concat_requires_fuse_params():
    params = init_params(replace(SMALL, query_mode="add"), 1)
    with pytest.raises(ValueError):
        build_queries(ad.Tensor(np.zeros((64, 16))), params, "concat")


# --- decoder and heads -------------------------------------------------------------------

def test_decoder_memory_permutation_invariance():
    params = init_params(SMALL, 9)
    rng = np.random.default_rng(1)
    q = ad.Tensor(rng.normal(size=(16, 16)))
    mem = rng.normal(size=(64, 16))
    pos = sine_positions(8, 8, 16)
    perm = rng.permutation(64)
    with ad.no_grad():
        a = decoder_forward(q, ad.Tensor(mem), pos, params).data
        b = decoder_forward(q, ad.Tensor(mem[perm]), pos[perm], params).data
    assert a.shape == (16, 16)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_decoder_gradient():
    params = generic_params()
    rng = np.random.default_rng(2)
    q, mem = rng.normal(size=(4, 8)), rng.normal(size=(16, 8))
    pos = sine_positions(4, 4, 8)
    assert ad.finite_difference_check(lambda x: ad.sum(ad.square(decoder_forward(x, ad.Tensor(mem), pos, params))),
                                      q, EPSILON) < 1e-4
    assert ad.finite_difference_check(lambda x: ad.sum(ad.square(decoder_forward(ad.Tensor(q), x, pos, params))),
                                      mem, EPSILON) < 1e-4


def test_heads_zero_gives_half():
    params = init_params(MINI, 0)
    for k in list(params.tensors):
        if k.startswith("head."):
            params.tensors[k] = ad.Tensor(np.zeros_like(params[k].data))
    with ad.no_grad():
        p = prediction_heads(ad.Tensor(np.zeros((4, 8))), params)
    assert np.all(p.xy == 0.5) and np.all(p.conf == 0.5)


def test_heads_gradient():
    params = init_params(MINI, 11)
    emb = np.random.default_rng(3).normal(size=(4, 8))

    def f(x):
        p = prediction_heads(x, params)
        return ad.sum(p.points * np.arange(8.0).reshape(4, 2)) + ad.sum(ad.log(p.confidence))
    assert ad.finite_difference_check(f, emb, 1e-6) < 1e-4


def test_sine_positions():
    pos = sine_positions(4, 6, 8)
    assert pos.shape == (24, 8)
    assert len({tuple(r) for r in np.round(pos, 12)}) == 24
    assert np.all(np.abs(pos) <= 1)


# --- full model -----------------------------------------------------------------------------

def test_forward_shapes_and_ranges():
    params = init_params(SMALL, 0)
    with ad.no_grad():
        preds, dens = model_forward(_clip(SMALL), params)
    assert preds.points.shape == (16, 2) and preds.confidence.shape == (16,)
    assert dens.shape == (5, 32, 32)
    assert np.all((preds.xy > 0) & (preds.xy < 1))
    assert np.all((preds.conf > 0) & (preds.conf < 1))


def test_forward_single_frame():
    cfg = replace(SMALL, frames=1, reference_frame=0)
    with ad.no_grad():
        preds, dens = model_forward(_clip(cfg), init_params(cfg))
    assert len(preds) == 16 and dens.shape == (1, 32, 32)


def test_forward_rejects_wrong_clip():
    with pytest.raises(ad.ShapeError):
        model_forward(np.zeros((3, 32, 32, 3)), init_params(SMALL))


def test_forward_deterministic():
    params = init_params(SMALL, 0)
    clip = _clip(SMALL, 3)
    with ad.no_grad():
        a, da = model_forward(clip, params)
        b, db = model_forward(clip, params)
    assert a.xy.tobytes() == b.xy.tobytes() and a.conf.tobytes() == b.conf.tobytes()
    assert da.data.tobytes() == db.data.tobytes()


def test_every_attention_row_sums_to_one():
    log = []
    with ad.no_grad():
        model_forward(_clip(SMALL), init_params(SMALL), log=log)
    # temporal + 2 encoder + 2x2 decoder attention calls
    assert len(log) == 1 + 2 + 4
    for w in log:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(w >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_outputs_in_unit_interval(seed, scale):
    clip = np.random.default_rng(seed).normal(size=(2, 16, 16, 3)) * scale
    with ad.no_grad():
        preds, dens = model_forward(clip, init_params(MINI, seed % 7))
    assert np.all((preds.xy >= 0) & (preds.xy <= 1)) and np.all((preds.conf >= 0) & (preds.conf <= 1))
    assert np.all(np.isfinite(dens.data))


def test_end_to_end_gradient_every_group():
    problem = MiniProblem(generic_params())
    names = problem.params.names()
    assert {n.split(".")[0] for n in names} == {
        "backbone", "density", "temporal", "encoder", "queries", "decoder", "head"}
    rng = np.random.default_rng(13)
    for name in names:
        err = problem.check(name, _sample_indices(problem.params[name].data.size, rng, 3))
        assert err < 1e-4, name


def test_no_key_bias():
    # softmax over keys is shift invariant, so a key bias would never get a gradient
    params = init_params(SMALL)
    assert not [n for n in params.names() if n.endswith(".bk")]
    assert "temporal.wk" in params.names() and "decoder.0.cross_attn.wk" in params.names()
