"""Validation metrics and longitudinal tracking.

Percentiles everywhere use linear interpolation between order statistics
(numpy's default ``linear`` method).
"""
from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .core import N_CLASSES, LabelSequence


class EvalError(ValueError):
    pass


def _classes(seq) -> np.ndarray:
    return seq.classes if isinstance(seq, LabelSequence) else np.asarray(seq)


def iou_per_class(truth, pred) -> np.ndarray:
    """100 x |intersection| / |union| per class; NaN where the class is absent from both."""
    t, p = _classes(truth), _classes(pred)
    if t.shape != p.shape:
        raise EvalError(f"sequences differ in length ({t.size} vs {p.size})")
    out = np.full(N_CLASSES, np.nan)
    for c in range(N_CLASSES):
        a, b = t == c, p == c
        union = np.count_nonzero(a | b)
        if union:
            out[c] = 100.0 * np.count_nonzero(a & b) / union
    return out


def mean_iou(rows) -> np.ndarray:
    """Per-class mean over records, skipping undefined entries."""
    arr = np.asarray(rows, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(arr, axis=0)


def _pairs(estimates, references):
    e = np.asarray(estimates, dtype=np.float64).ravel()
    r = np.asarray(references, dtype=np.float64).ravel()
    if e.shape != r.shape:
        raise EvalError(f"{e.size} estimates but {r.size} references")
    if e.size == 0:
        raise EvalError("no pairs")
    return e, r


def abs_dev_percentiles(estimates, references) -> dict[str, float]:
    """Percentiles of |est - ref| / ref, in percent."""
    e, r = _pairs(estimates, references)
    zero = np.flatnonzero(r == 0)
    if zero.size:
        raise EvalError(f"reference at index {int(zero[0])} is zero")
    dev = np.abs(e - r) / np.abs(r) * 100.0
    q = np.quantile(dev, [0.5, 0.75, 0.95])
    return {"p50": float(q[0]), "p75": float(q[1]), "p95": float(q[2])}


BAND_QUANTILES = {"50": (0.25, 0.75), "75": (0.125, 0.875), "95": (0.025, 0.975)}


@dataclass(frozen=True, eq=False)
class BlandAltman:
    means: np.ndarray
    diffs: np.ndarray
    median: float
    bands: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {"median": self.median, "bands": {k: list(v) for k, v in self.bands.items()}}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mean", "difference"])
            for m, d in zip(self.means, self.diffs):
                w.writerow([repr(float(m)), repr(float(d))])

    def write_svg(self, path, width: int = 480, height: int = 320) -> None:
        lo_all = min(self.bands["95"][0], float(self.diffs.min()))
        hi_all = max(self.bands["95"][1], float(self.diffs.max()))
        lines = [(self.median, "#000")] + [(v, "#888") for b in self.bands.values() for v in b]
        _write_scatter_svg(path, self.means, self.diffs, (lo_all, hi_all), lines,
                           width, height, "mean", "difference")


def bland_altman_bands(estimates, references) -> BlandAltman:
    e, r = _pairs(estimates, references)
    if e.size < 4:
        raise EvalError(f"need at least 4 pairs, got {e.size}")
    diffs = e - r
    means = 0.5 * (e + r)
    bands = {k: (float(np.quantile(diffs, lo)), float(np.quantile(diffs, hi)))
             for k, (lo, hi) in BAND_QUANTILES.items()}
    return BlandAltman(means, diffs, float(np.median(diffs)), bands)


# -- ROC ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RocCurve:
    """Operating points for 'positive when score >= threshold', thresholds ascending.

    The last threshold is +inf (nothing called positive).
    """

    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    auroc: float
    n_cases: int
    n_controls: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "sensitivity", "specificity"])
            for t, se, sp in zip(self.thresholds, self.sensitivity, self.specificity):
                w.writerow([repr(float(t)), repr(float(se)), repr(float(sp))])


def _split_scores(scores, case_flags):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(case_flags).astype(bool).ravel()
    if s.shape != y.shape:
        raise EvalError(f"{s.size} scores but {y.size} case flags")
    if not np.all(np.isfinite(s)):
        raise EvalError("scores must be finite")
    return s, y


def auc_mann_whitney(scores, case_flags) -> float:
    s, y = _split_scores(scores, case_flags)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise EvalError("need at least one case and one control")
    ranks = stats.rankdata(s)                      # midranks give ties 1/2
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def auroc(scores, case_flags) -> RocCurve:
    s, y = _split_scores(scores, case_flags)
    area = auc_mann_whitney(s, y)
    thresholds = np.append(np.unique(s), np.inf)
    pos, neg = np.sort(s[y]), np.sort(s[~y])
    # count of cases with score >= t, controls with score < t
    sens = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    spec = np.searchsorted(neg, thresholds, side="left") / neg.size
    return RocCurve(thresholds, sens, spec, area, pos.size, neg.size)


def delong_variance(scores, case_flags) -> tuple[float, float]:
    """AUROC and its DeLong variance from placement values."""
    s, y = _split_scores(scores, case_flags)
    pos, neg = s[y], s[~y]
    m, n = pos.size, neg.size
    if m < 2 or n < 2:
        raise EvalError("need at least 2 cases and 2 controls")
    neg_sorted, pos_sorted = np.sort(neg), np.sort(pos)
    # fraction of controls below each case (ties 1/2), and of cases above each control
    v10 = (np.searchsorted(neg_sorted, pos, "left") + np.searchsorted(neg_sorted, pos, "right")) / (2 * n)
    v01 = 1.0 - (np.searchsorted(pos_sorted, neg, "left")
                 + np.searchsorted(pos_sorted, neg, "right")) / (2 * m)
    area = float(v10.mean())
    var = float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)
    return area, var


def delong_ci(scores, case_flags, level: float = 0.95) -> tuple[float, float, float]:
    area, var = delong_variance(scores, case_flags)
    if var <= 0:
        if area in (0.0, 1.0):
            warnings.warn("DeLong variance is zero; returning a zero-width interval",
                          stacklevel=2)
        return area, area, area
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * math.sqrt(var)
    return area, max(0.0, area - half), min(1.0, area + half)


def threshold_for(roc: RocCurve, min_sens: float = 0.80, min_spec: float = 0.90):
    """Lowest threshold meeting both constraints, or None."""
    ok = (roc.sensitivity >= min_sens) & (roc.specificity >= min_spec)
    if not ok.any():
        return None
    return float(roc.thresholds[np.flatnonzero(ok)[0]])


# -- tracking ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrackSeries:
    """Per patient, (year, median score) pairs sorted by year."""

    series: dict[str, tuple[tuple[int, float], ...]]

    def spearman(self) -> dict[str, float]:
        out = {}
        for pid, pts in self.series.items():
            years = [y for y, _ in pts]
            vals = [v for _, v in pts]
            if np.ptp(vals) == 0:
                out[pid] = float("nan")
            else:
                out[pid] = float(stats.spearmanr(years, vals).statistic)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "year", "median_score"])
            for pid in sorted(self.series):
                for year, v in self.series[pid]:
                    w.writerow([pid, year, repr(float(v))])

    def write_svg(self, path, width: int = 480, height: int = 320) -> None:
        pts = [(y, v) for s in self.series.values() for y, v in s]
        if not pts:
            Path(path).write_text(_svg_frame(width, height, ""))
            return
        xs = np.array([p[0] for p in pts], dtype=float)
        ys = np.array([p[1] for p in pts], dtype=float)
        fx, fy = _scalers(xs, ys, width, height)
        body = []
        for pid in sorted(self.series):
            coords = " ".join(f"{fx(y):.2f},{fy(v):.2f}" for y, v in self.series[pid])
            body.append(f'<polyline fill="none" stroke="#336" points="{coords}"/>')
        Path(path).write_text(_svg_frame(width, height, "\n".join(body)))


def track_scores(scores, patient_ids, dates) -> TrackSeries:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not np.all(np.isfinite(s)):
        raise EvalError("scores must be finite")
    if not (len(patient_ids) == len(dates) == s.size):
        raise EvalError("scores, patient_ids and dates must have equal length")
    by = defaultdict(lambda: defaultdict(list))
    for v, pid, d in zip(s, patient_ids, dates):
        year = d.year if isinstance(d, (dt.date, dt.datetime)) else int(d)
        by[str(pid)][year].append(float(v))
    series = {}
    for pid in sorted(by):
        years = by[pid]
        if len(years) < 2:
            continue
        series[pid] = tuple((y, float(np.median(years[y]))) for y in sorted(years))
    return TrackSeries(series)


# -- minimal SVG -------------------------------------------------------------------

def _svg_frame(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n{body}\n</svg>\n')


def _scalers(xs, ys, width, height, pad=30, ylim=None):
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = ylim if ylim is not None else (float(np.min(ys)), float(np.max(ys)))
    dx = (x1 - x0) or 1.0
    dy = (y1 - y0) or 1.0
    return (lambda x: pad + (x - x0) / dx * (width - 2 * pad),
            lambda y: height - pad - (y - y0) / dy * (height - 2 * pad))


def _write_scatter_svg(path, xs, ys, ylim, hlines, width, height, xlabel, ylabel):
    fx, fy = _scalers(xs, ys, width, height, ylim=ylim)
    body = [f'<circle cx="{fx(x):.2f}" cy="{fy(y):.2f}" r="2" fill="#336"/>'
            for x, y in zip(xs, ys)]
    for v, color in hlines:
        body.append(f'<line x1="{fx(np.min(xs)):.2f}" x2="{fx(np.max(xs)):.2f}" '
                    f'y1="{fy(v):.2f}" y2="{fy(v):.2f}" stroke="{color}"/>')
    body.append(f'<text x="{width / 2:.0f}" y="{height - 5}">{xlabel}</text>')
    body.append(f'<text x="5" y="15">{ylabel}</text>')
    Path(path).write_text(_svg_frame(width, height, "\n".join(body)))
