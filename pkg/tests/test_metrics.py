import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cycdepth.metrics import (METRIC_NAMES, EmptyMaskError, EvalConfig, MetricsAccumulator, MetricsReport,
                              compute_metrics, evaluate_dataset)
from cycdepth.networks import CycleModel, GeneratorConfig
from cycdepth.data import SyntheticDataset, SyntheticSceneSpec


def scalar_metrics(pred, gt, cap=80.0, lo=1e-3):
    """Loop-per-pixel reference."""
    n = s_abs = s_sq = s_se = s_log = 0.0
    hits = [0, 0, 0]
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if not g > 0:
            continue
        p, g = min(max(float(p), lo), cap), min(max(float(g), lo), cap)
        n += 1
        s_abs += abs(p - g) / g
        s_sq += (p - g) ** 2 / g
        s_se += (p - g) ** 2
        s_log += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        for k in range(3):
            hits[k] += r < 1.25 ** (k + 1)
    return dict(abs_rel=s_abs / n, sq_rel=s_sq / n, rmse=math.sqrt(s_se / n), rmse_log=math.sqrt(s_log / n),
                a1=hits[0] / n, a2=hits[1] / n, a3=hits[2] / n, valid_pixel_count=int(n))


def test_perfect_prediction():
    gt = np.array([[1.0, 5.0], [0.0, 30.0]])
    r = compute_metrics(gt, gt)
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.a1, r.a2, r.a3) == (0, 0, 0, 0, 1, 1, 1)
    assert r.valid_pixel_count == 3


def test_four_five_example():
    r = compute_metrics(np.array([5.0]), np.array([4.0]))
    assert r.abs_rel == pytest.approx(0.25) and r.sq_rel == pytest.approx(0.25)
    assert r.rmse == pytest.approx(1.0) and r.rmse_log == pytest.approx(abs(math.log(1.25)))
    assert (r.a1, r.a2, r.a3) == (0, 1, 1)
    swapped = compute_metrics(np.array([4.0]), np.array([5.0]))
    assert swapped.abs_rel == pytest.approx(0.2)
    assert (swapped.a1, swapped.a2, swapped.a3) == (r.a1, r.a2, r.a3)


@pytest.mark.parametrize("seed", range(100))
def test_random_fields_match_scalar_loop(seed):
    r = np.random.default_rng(seed)
    gt = r.uniform(0.5, 90, (6, 9)) * (r.random((6, 9)) > 0.2)
    gt.ravel()[0] = 10.0
    pred = r.uniform(-1, 100, (6, 9))
    got = compute_metrics(pred, gt).as_dict()
    for k, v in scalar_metrics(pred, gt).items():
        assert got[k] == pytest.approx(v, rel=1e-6, abs=1e-12), k


def test_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        compute_metrics(np.ones((2, 2)), np.zeros((2, 2)))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 2)), np.ones((2, 3)))


def test_cap_changes_report():
    gt, pred = np.array([60.0, 10.0]), np.array([70.0, 11.0])
    assert compute_metrics(pred, gt, EvalConfig(cap_m=80)).abs_rel != compute_metrics(pred, gt, EvalConfig(cap_m=50)).abs_rel


def test_crop_rectangle():
    gt = np.arange(1, 17, dtype=float).reshape(4, 4)
    pred = gt.copy()
    pred[0, 0] = 100
    assert compute_metrics(pred, gt, EvalConfig(crop=(0.5, 1.0, 0.0, 1.0))).abs_rel == 0
    assert compute_metrics(pred, gt, EvalConfig(crop=(0.5, 1.0, 0.0, 1.0))).valid_pixel_count == 8


def test_config_validation():
    for kw in ({"cap_m": 0}, {"crop": (0.5, 0.5, 0, 1)}, {"evaluate_on": "x"}, {"pooling": "x"}):
        with pytest.raises(ValueError):
            EvalConfig(**kw)


def test_report_line_round_trip():
    r = compute_metrics(np.array([5.0, 3.0]), np.array([4.0, 3.3]))
    line = r.format_line()
    assert line.split()[0].startswith("abs_rel=") and line.endswith("valid_pixel_count=2")
    back = MetricsReport.parse_line(line)
    for k in METRIC_NAMES:
        assert getattr(back, k) == pytest.approx(getattr(r, k), rel=1e-5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(0.01, 100)), min_size=1, max_size=30), st.randoms())
def test_nesting_permutation_and_symmetry(pairs, rnd):
    pred, gt = np.array([p for p, _ in pairs]), np.array([g for _, g in pairs])
    r = compute_metrics(pred, gt)
    assert 0 <= r.a1 <= r.a2 <= r.a3 <= 1
    idx = list(range(len(pairs)))
    rnd.shuffle(idx)
    rp = compute_metrics(pred[idx], gt[idx])
    for k in METRIC_NAMES:
        assert getattr(rp, k) == pytest.approx(getattr(r, k), rel=1e-9, abs=1e-12)
    sw = compute_metrics(gt, pred)
    assert (sw.a1, sw.a2, sw.a3) == (r.a1, r.a2, r.a3)


def test_pixel_pooling_equals_concatenation(rng):
    preds = [rng.uniform(1, 50, (4, 5)), rng.uniform(1, 50, (3, 7))]
    gts = [rng.uniform(1, 50, (4, 5)) * (rng.random((4, 5)) > 0.3), rng.uniform(1, 50, (3, 7))]
    acc = MetricsAccumulator(EvalConfig())
    for p, g in zip(preds, gts):
        acc.add(p, g)
    pooled = acc.report().as_dict()
    ref = scalar_metrics(np.concatenate([p.ravel() for p in preds]), np.concatenate([g.ravel() for g in gts]))
    for k, v in ref.items():
        assert pooled[k] == pytest.approx(v, rel=1e-9), k


def test_duplicates_do_not_change_report(rng):
    p, g = rng.uniform(1, 50, (4, 5)), rng.uniform(1, 50, (4, 5))
    one, two = MetricsAccumulator(EvalConfig()), MetricsAccumulator(EvalConfig())
    one.add(p, g)
    two.add(p, g)
    two.add(p, g)
    a, b = one.report(), two.report()
    for k in METRIC_NAMES:
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12)


def test_image_pooling_averages_per_image():
    acc = MetricsAccumulator(EvalConfig(pooling="image"))
    acc.add(np.array([5.0]), np.array([4.0]))
    acc.add(np.array([2.0, 2.0, 2.0]), np.array([2.0, 2.0, 2.0]))
    assert acc.report().abs_rel == pytest.approx(0.125)


def test_accumulator_empty_rejected():
    with pytest.raises(EmptyMaskError):
        MetricsAccumulator(EvalConfig()).report()


def test_evaluate_dataset_runs_on_disparity_and_depth():
    ds = SyntheticDataset(3, SyntheticSceneSpec(width=64, height=32), seed=0)
    m = CycleModel("full", GeneratorConfig(levels=2, base_channels=4), seed=0)
    r_disp = evaluate_dataset(m, ds, EvalConfig(evaluate_on="disparity"), batch_size=2)
    r_depth = evaluate_dataset(m, ds, EvalConfig(evaluate_on="depth"), batch_size=2)
    assert r_disp.valid_pixel_count == r_depth.valid_pixel_count == 3 * 32 * 64
    # depth is inversely related to disparity, so the two protocols disagree
    assert r_disp.abs_rel != r_depth.abs_rel


def test_evaluate_dataset_empty_rejected():
    with pytest.raises(ValueError):
        evaluate_dataset(CycleModel("stereo", GeneratorConfig(levels=2, base_channels=4)),
                         SyntheticDataset(0, SyntheticSceneSpec(width=64, height=32)))
