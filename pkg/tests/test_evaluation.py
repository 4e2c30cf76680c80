import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidcount import autodiff as ad
from vidcount.data import (
    Frame,
    FrameSequence,
    PointAnnotationSet,
    SyntheticSceneConfig,
    crop_patches,
    synthesize_sequence,
)
from vidcount.evaluation import (
    InferenceConfig,
    MetricsReport,
    clip_indices,
    compute_metrics,
    evaluate_split,
    filter_by_threshold,
    format_csv,
    predict_frame,
    stitch_patch_predictions,
    write_csv,
)
from vidcount.model import ModelConfig, PointPredictionSet, init_params, model_forward

CFG = ModelConfig(crop_size=32, downsample_factor=4, backbone_channels=(8, 8), token_dim=16,
                  density_feature_dim=16, encoder_layers=1, decoder_layers=1, attention_heads=2,
                  num_queries=16, frames=3)


def _preds(xy, conf):
    return PointPredictionSet(ad.Tensor(np.asarray(xy, float).reshape(-1, 2)),
                              ad.Tensor(np.asarray(conf, float)))


# --- threshold -------------------------------------------------------------------

def test_threshold_strict():
    kept = filter_by_threshold(_preds([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]], [0.9, 0.3, 0.29]), 0.3)
    assert kept.conf.tolist() == [0.9] and kept.xy.tolist() == [[0.1, 0.1]]


def test_threshold_extremes():
    p = _preds(np.full((4, 2), 0.5), [1e-9, 0.5, 0.999, 0.3])
    assert len(filter_by_threshold(p, 0.0)) == 4
    assert len(filter_by_threshold(p, 1.0)) == 0


def test_threshold_domain():
    with pytest.raises(ValueError):
        filter_by_threshold(_preds([[0.5, 0.5]], [0.5]), 1.5)
    with pytest.raises(ValueError):
        InferenceConfig(threshold=-0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=20), st.floats(0, 1))
def test_threshold_idempotent_and_ordered(confs, tau):
    p = _preds(np.arange(2 * len(confs), dtype=float).reshape(-1, 2) / 100, confs)
    once = filter_by_threshold(p, tau)
    twice = filter_by_threshold(once, tau)
    assert once.conf.tolist() == twice.conf.tolist() == [c for c in confs if c > tau]
    assert np.array_equal(once.xy, twice.xy)


# --- stitching --------------------------------------------------------------------

def test_stitch_maps_to_global_pixels():
    grid = crop_patches((64, 64), 32)
    out = stitch_patch_predictions({(32, 0): _preds([[0.25, 0.25]], [0.9])}, grid)
    np.testing.assert_array_equal(out, [[40.0, 8.0]])


def test_stitch_overlap_dedup():
    grid = crop_patches((32, 50), 32)
    # global x = 20: from origin 0 it is 0.625, from origin 18 it is 0.0625
    left = stitch_patch_predictions({(0, 0): np.array([[20 / 32, 0.5]])}, grid)
    right = stitch_patch_predictions({(18, 0): np.array([[2 / 32, 0.5]])}, grid)
    both = stitch_patch_predictions({(0, 0): np.array([[20 / 32, 0.5]]),
                                     (18, 0): np.array([[2 / 32, 0.5]])}, grid)
    assert len(left) == 0 and len(right) == 1 and len(both) == 1
    np.testing.assert_allclose(both, [[20.0, 16.0]])


def test_stitch_single_patch_keeps_all():
    grid = crop_patches((32, 32), 32)
    pts = np.random.default_rng(0).uniform(0, 1, size=(9, 2)) * (1 - 1e-9)
    assert len(stitch_patch_predictions({(0, 0): pts}, grid)) == 9


def test_stitch_unknown_origin():
    with pytest.raises(KeyError):
        stitch_patch_predictions({(5, 5): np.zeros((1, 2))}, crop_patches((64, 64), 32))


@pytest.mark.parametrize("shape,patch", [((50, 50), 32), ((40, 70), 16), ((33, 33), 32), ((64, 96), 32)])
def test_stitch_conservation_exhaustive(shape, patch):
    """Every pixel-center point, seen from every patch containing it, is counted exactly once."""
    grid = crop_patches(shape, patch)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    world = np.stack([xs.ravel(), ys.ravel()], axis=1)
    per_patch = {}
    expected = 0
    for (x0, y0), (xl, xh, yl, yh) in zip(grid.origins, grid.ownership):
        inside = (world[:, 0] >= x0) & (world[:, 0] < x0 + patch) & \
                 (world[:, 1] >= y0) & (world[:, 1] < y0 + patch)
        local = (world[inside] - [x0, y0]) / patch
        per_patch[(x0, y0)] = local
        g = world[inside]
        expected += int(((g[:, 0] >= xl) & (g[:, 0] < xh) & (g[:, 1] >= yl) & (g[:, 1] < yh)).sum())
    out = stitch_patch_predictions(per_patch, grid)
    assert len(out) == expected == h * w
    assert len({tuple(p) for p in np.round(out, 6)}) == h * w


# --- metrics -----------------------------------------------------------------------

def test_metrics_perfect():
    r = compute_metrics([3, 0, 7], [3, 0, 7])
    assert (r.mae, r.mse, r.nae) == (0.0, 0.0, 0.0)
    assert (r.n_frames, r.n_frames_nae) == (3, 2)


def test_metrics_fixture():
    r = compute_metrics([10, 20], [12, 16])
    assert r.mae == pytest.approx(3.0, abs=1e-4)
    assert r.mse == pytest.approx(math.sqrt(10), abs=1e-4)
    assert r.nae == pytest.approx((2 / 12 + 4 / 16) / 2, abs=1e-4)


def test_metrics_zero_gt_excluded_from_nae():
    r = compute_metrics([2, 3], [0, 6])
    assert r.mae == 2.5 and r.nae == 0.5 and r.n_frames_nae == 1
    assert compute_metrics([1], [0]).nae == 0.0


def test_render():
    assert MetricsReport(13.714, 17.909, 0.394, 1, 1).render() == "MAE 13.714 MSE 17.909 NAE 0.394"
    assert str(MetricsReport(1.0, 2.5, 0.0, 1, 1)) == "MAE 1.000 MSE 2.500 NAE 0.000"


@pytest.mark.parametrize("p,g", [([], []), ([1, 2], [1]), ([-1], [2]), ([1], [-2])])
def test_metrics_errors(p, g):
    with pytest.raises(ValueError):
        compute_metrics(p, g)


counts = st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60)), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(counts, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = compute_metrics([p for p, _ in pairs], [g for _, g in pairs])
    b = compute_metrics([p for p, _ in shuffled], [g for _, g in shuffled])
    assert a.mae == pytest.approx(b.mae, abs=1e-12)
    assert a.mse == pytest.approx(b.mse, abs=1e-12)
    assert a.nae == pytest.approx(b.nae, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(counts, st.integers(1, 9))
def test_metrics_scaling(pairs, k):
    a = compute_metrics([p for p, _ in pairs], [g for _, g in pairs])
    b = compute_metrics([k * p for p, _ in pairs], [k * g for _, g in pairs])
    assert b.nae == pytest.approx(a.nae, abs=1e-12)
    assert b.mae == pytest.approx(k * a.mae, abs=1e-9)
    assert b.mse == pytest.approx(k * a.mse, abs=1e-9)


# --- temporal windows --------------------------------------------------------------

def test_clip_indices_center_and_edges():
    assert clip_indices(5, 10, 5, 2) == [3, 4, 5, 6, 7]
    assert clip_indices(0, 10, 5, 2) == [0, 0, 0, 1, 2]
    assert clip_indices(9, 10, 5, 2) == [7, 8, 9, 9, 9]
    assert clip_indices(0, 1, 3, 1) == [0, 0, 0]


# --- full split evaluation -----------------------------------------------------------

def _seq(seed, n_frames=2, size=(36, 44), sid="s"):
    return synthesize_sequence(SyntheticSceneConfig(frame_size=size, num_frames=n_frames,
                                                    count_range=(2, 4), object_radius_range=(2.0, 3.0),
                                                    seed=seed, sequence_id=sid))


def _silent_params():
    params = init_params(CFG, 0)
    params.tensors["head.cls.b"] = ad.Tensor(np.array([-60.0]))
    return params


def test_nothing_predicted_gives_mae_equal_gt():
    seq, pts = _seq(1, n_frames=1)
    report, rows = evaluate_split(_silent_params(), [(seq, pts)])
    gt = pts.count(0)
    assert rows == [("s", 0, gt, 0, gt)]
    assert report.mae == gt and report.nae == 1.0


def test_duplicated_split_same_metrics():
    params = init_params(CFG, 1)
    params.tensors["head.cls.b"] = ad.Tensor(np.array([0.3]))
    data = [_seq(2, sid="a"), _seq(3, sid="b")]
    r1, rows1 = evaluate_split(params, data, 0.5)
    r2, rows2 = evaluate_split(params, data + data, 0.5)
    assert rows2 == rows1 + rows1
    assert (r1.mae, r1.mse, r1.nae) == pytest.approx((r2.mae, r2.mse, r2.nae), abs=1e-12)


def test_evaluate_equals_manual_composition():
    params = init_params(CFG, 4)
    params.tensors["head.cls.b"] = ad.Tensor(np.array([0.2]))
    seq, pts = _seq(5, n_frames=2)
    _, rows = evaluate_split(params, [(seq, pts)], 0.55)
    stack = seq.stack()
    grid = crop_patches((36, 44), 32)
    manual = []
    for pos in range(2):
        idx = clip_indices(pos, 2, CFG.frames, CFG.reference_frame)
        kept = {}
        with ad.no_grad():
            for x0, y0 in grid.origins:
                preds, _ = model_forward(stack[idx, y0:y0 + 32, x0:x0 + 32], params)
                kept[(x0, y0)] = filter_by_threshold(preds, 0.55)
        n = len(stitch_patch_predictions(kept, grid))
        manual.append(("s", pos, pts.count(pos), n, abs(n - pts.count(pos))))
    assert rows == manual
    assert any(r[3] > 0 for r in rows)


def test_predict_frame_too_small():
    stack = np.zeros((1, 20, 40, 3))
    with pytest.raises(ValueError):
        predict_frame(init_params(CFG), stack, 0)


def test_predict_frame_points_inside_frame():
    params = init_params(CFG, 2)
    params.tensors["head.cls.b"] = ad.Tensor(np.array([40.0]))
    seq, _ = _seq(6, n_frames=3)
    pts = predict_frame(params, seq.stack(), 1, 0.3)
    assert len(pts) > 0
    assert np.all((pts >= 0) & (pts < [44, 36]))


def test_evaluate_reproducible():
    params = init_params(replace(CFG, frames=1, reference_frame=0), 3)
    seq = FrameSequence("z", 10, [Frame(i, np.full((32, 32, 3), 0.1 * i)) for i in range(3)])
    pts = PointAnnotationSet({0: np.zeros((0, 2)), 1: np.array([[3.0, 4.0]]), 2: np.zeros((0, 2))})
    a = evaluate_split(params, [(seq, pts)])
    b = evaluate_split(params, [(seq, pts)])
    assert a == b


# --- CSV -------------------------------------------------------------------------------

def test_csv_format(tmp_path):
    rows = [("seq_000", 0, 3, 2, 1), ("seq_000", 1, 0, 0, 0)]
    text = format_csv(rows)
    assert text == ("sequence_id,frame_index,gt_count,pred_count,abs_err\n"
                    "seq_000,0,3,2,1\nseq_000,1,0,0,0\n")
    write_csv(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_bytes() == text.encode("utf-8")
