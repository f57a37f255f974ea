import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgai import evaluation as ev


def test_iou_known_value():
    truth = np.array([0, 0, 0, 1, 1, 1])
    pred = np.array([0, 0, 1, 1, 1, 1])
    iou = ev.iou_per_class(truth, pred)
    assert iou[0] == pytest.approx(200 / 3)
    assert iou[1] == pytest.approx(75.0)
    assert np.all(np.isnan(iou[2:]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_iou_symmetric_and_bounded(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    x, y = ev.iou_per_class(a, b), ev.iou_per_class(b, a)
    np.testing.assert_array_equal(np.isnan(x), np.isnan(y))
    np.testing.assert_allclose(x[~np.isnan(x)], y[~np.isnan(y)])
    assert np.all((x[~np.isnan(x)] >= 0) & (x[~np.isnan(x)] <= 100))
    np.testing.assert_array_equal(ev.iou_per_class(a, a)[np.unique(a)], 100.0)


def test_iou_length_mismatch():
    with pytest.raises(ev.EvalError):
        ev.iou_per_class(np.zeros(3), np.zeros(4))


def test_mean_iou_skips_absent():
    rows = [[100.0, np.nan], [50.0, 80.0]]
    np.testing.assert_allclose(ev.mean_iou(rows), [75.0, 80.0])


def test_abs_dev_examples():
    out = ev.abs_dev_percentiles([110, 90, 100, 100, 120], [100] * 5)
    # deviations 10, 10, 0, 0, 20 -> sorted 0 0 10 10 20
    assert out == {"p50": 10.0, "p75": 10.0, "p95": pytest.approx(18.0)}
    with pytest.raises(ev.EvalError, match="index 1"):
        ev.abs_dev_percentiles([1, 2], [1, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.5, 10), min_size=2, max_size=20), st.floats(0.01, 1000))
def test_abs_dev_scale_invariant(refs, c):
    refs = np.array(refs)
    est = refs * np.linspace(0.8, 1.2, refs.size)
    a = ev.abs_dev_percentiles(est, refs)
    b = ev.abs_dev_percentiles(est * c, refs * c)
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=1e-9, abs=1e-9)


def test_bland_altman_identical_and_shift():
    ref = np.arange(10.0)
    ba = ev.bland_altman_bands(ref, ref)
    assert ba.median == 0 and all(v == (0.0, 0.0) for v in ba.bands.values())
    shifted = ev.bland_altman_bands(ref + np.where(np.arange(10) % 2, 1.0, -1.0), ref)
    assert shifted.median == 0
    assert shifted.bands["95"] == (-1.0, 1.0)
    with pytest.raises(ev.EvalError):
        ev.bland_altman_bands([1, 2, 3], [1, 2, 3])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=40))
def test_bland_altman_bands_nest(diffs):
    ref = np.zeros(len(diffs))
    b = ev.bland_altman_bands(np.array(diffs), ref).bands
    assert b["95"][0] <= b["75"][0] <= b["50"][0] <= b["50"][1] <= b["75"][1] <= b["95"][1]


def test_auroc_extremes_and_ties():
    y = np.array([0, 0, 0, 1, 1, 1])
    assert ev.auroc([1, 2, 3, 4, 5, 6], y).auroc == 1.0
    assert ev.auroc([6, 5, 4, 3, 2, 1], y).auroc == 0.0
    assert ev.auroc(np.ones(6), y).auroc == 0.5
    roc = ev.auroc([1, 2, 3, 4, 5, 6], y)
    assert roc.sensitivity[0] == 1 and roc.specificity[0] == 0
    assert roc.sensitivity[-1] == 0 and roc.specificity[-1] == 1
    assert np.all(np.diff(roc.sensitivity) <= 0) and np.all(np.diff(roc.specificity) >= 0)
    with pytest.raises(ev.EvalError):
        ev.auroc([1, 2], [1, 1])


def test_auroc_hand_example():
    # cases {0.8, 0.4}, controls {0.4, 0.2}: pairs win 1, 1, 1/2, 1 -> 3.5 / 4
    assert ev.auc_mann_whitney([0.8, 0.4, 0.4, 0.2], [1, 1, 0, 0]) == 0.875


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 8, size=30).astype(float)
    y = rng.random(30) < 0.5
    y[:2] = [True, False]
    a = ev.auroc(s, y).auroc
    assert ev.auroc(np.exp(s / 3) * 5 - 2, y).auroc == pytest.approx(a, abs=1e-12)


def test_delong_interval_and_bootstrap():
    rng = np.random.default_rng(0)
    y = np.r_[np.ones(100, bool), np.zeros(100, bool)]
    s = np.r_[rng.normal(1, 1, 100), rng.normal(0, 1, 100)]
    auc, lo, hi = ev.delong_ci(s, y)
    assert lo <= auc <= hi
    _, var = ev.delong_variance(s, y)
    boot = []
    for _ in range(1000):
        i = np.r_[rng.integers(0, 100, 100), rng.integers(100, 200, 100)]
        boot.append(ev.auc_mann_whitney(s[i], y[i]))
    assert var == pytest.approx(np.var(boot), rel=0.25)


def test_delong_degenerate_warns():
    with pytest.warns(UserWarning, match="zero"):
        auc, lo, hi = ev.delong_ci([3, 4, 1, 2], [1, 1, 0, 0])
    assert auc == lo == hi == 1.0


def test_threshold_for():
    y = np.array([0] * 10 + [1] * 10)
    s = np.arange(20.0)
    t = ev.threshold_for(ev.auroc(s, y))
    assert t == 9.0                      # lowest threshold with spec >= 0.9 keeps sens = 1
    assert ev.threshold_for(ev.auroc(np.ones(20), y)) is None


def test_track_scores_median_and_exclusion():
    scores = [0.1, 0.4, 0.9, 0.5, 0.7, 0.3]
    pids = ["a", "a", "a", "a", "b", "c"]
    dates = [dt.date(2020, 1, 1), dt.date(2020, 5, 1), dt.date(2020, 9, 1),
             dt.date(2021, 1, 1), dt.date(2020, 1, 1), dt.date(2022, 1, 1)]
    tr = ev.track_scores(scores, pids, dates)
    assert list(tr.series) == ["a"]
    assert tr.series["a"] == ((2020, 0.4), (2021, 0.5))
    assert tr.spearman()["a"] == pytest.approx(1.0)


def test_spearman_constant_series_is_nan():
    tr = ev.track_scores([0.2, 0.2], ["x", "x"], [2019, 2020])
    assert np.isnan(tr.spearman()["x"])


def test_writers(tmp_path):
    ba = ev.bland_altman_bands([1, 2, 3, 4.5], [1, 2, 3, 4])
    ba.write_csv(tmp_path / "ba.csv")
    ba.write_svg(tmp_path / "ba.svg")
    assert (tmp_path / "ba.csv").read_text().splitlines()[0] == "mean,difference"
    assert (tmp_path / "ba.svg").read_text().startswith("<svg")
    roc = ev.auroc([1, 2, 3], [0, 1, 1])
    roc.write_csv(tmp_path / "roc.csv")
    assert len((tmp_path / "roc.csv").read_text().splitlines()) == 1 + roc.thresholds.size
