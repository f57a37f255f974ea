"""Gradient-boosted regression trees on ECG profiles.

Trees are exact least-squares CART: every midpoint between consecutive
distinct feature values is a candidate split.  Each node's rows are kept in
per-feature sorted order (inherited from the parent), so a split search
costs one pass over ``features x rows`` with no re-sorting.

Logistic models boost the negative gradient ``y - sigmoid(score)`` with
mean-residual leaves.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .measure import (FEATURE_NAMES, INTERVAL_NAMES, LAYOUT_VERSION, LEAD_NAMES, N_BINS,
                      PROFILE_LEN, SEGMENT_NAMES)

FORMAT_NAME = "ecgai-gbm"
FORMAT_VERSION = "1"
LOSSES = ("squared", "logistic")


class GbmError(ValueError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    max_depth: int
    min_leaf: int

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        def d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            r = rows[inner]
            n = node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def to_list(self) -> list:
        """Preorder serialization."""
        out = []

        def visit(i):
            if self.feature[i] < 0:
                out.append({"value": float(self.value[i])})
                return
            out.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                        "gain": float(self.gain[i]), "value": float(self.value[i])})
            visit(self.left[i])
            visit(self.right[i])
        visit(0)
        return out

    @classmethod
    def from_list(cls, nodes: list, max_depth: int, min_leaf: int) -> "RegressionTree":
        feature, threshold, left, right, value, gain = [], [], [], [], [], []
        pos = iter(range(len(nodes)))

        def build():
            k = next(pos)
            nd = nodes[k]
            i = len(feature)
            feature.append(nd.get("feature", -1))
            threshold.append(nd.get("threshold", 0.0))
            value.append(nd["value"])
            gain.append(nd.get("gain", 0.0))
            left.append(-1)
            right.append(-1)
            if feature[i] >= 0:
                left[i] = build()
                right[i] = build()
            return i
        build()
        return cls(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(value, dtype=np.float64), np.array(gain, dtype=np.float64),
                   max_depth, min_leaf)


class _Presorted:
    """Per-feature ascending row order, computed once per training matrix."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self.XT = np.ascontiguousarray(X.T)
        self.order = np.ascontiguousarray(np.argsort(self.XT, axis=1, kind="stable"))
        self.sorted_x = np.ascontiguousarray(np.take_along_axis(self.XT, self.order, axis=1))


@njit(cache=True)
def _level_splits(sorted_x, order, r, node_of, n_nodes, min_leaf):
    """Best split for every open node of one tree level in a single sweep.

    Rows are visited in each feature's global sorted order; per-node running
    sums give the left statistics at every boundary between two consecutive
    members of the same node.  Features and positions are scanned in order and
    only strictly better gains replace the incumbent, so ties go to the lowest
    feature index and then the lowest threshold.  ``node_of[row] < 0`` marks
    rows in closed nodes.
    """
    p, n = order.shape
    total = np.zeros(n_nodes)
    count = np.zeros(n_nodes, dtype=np.int64)
    for row in range(n):
        k = node_of[row]
        if k >= 0:
            total[k] += r[row]
            count[k] += 1
    base = np.empty(n_nodes)
    for k in range(n_nodes):
        base[k] = total[k] * total[k] / count[k] if count[k] > 0 else 0.0
    best = np.full(n_nodes, -np.inf)
    best_f = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    left = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, dtype=np.int64)
    last = np.zeros(n_nodes)
    for f in range(p):
        left[:] = 0.0
        seen[:] = 0
        for i in range(n):
            row = order[f, i]
            k = node_of[row]
            if k < 0:
                continue
            x = sorted_x[f, i]
            c = seen[k]
            m = count[k]
            if c >= min_leaf and m - c >= min_leaf and x != last[k]:
                lt = left[k]
                rt = total[k] - lt
                g = lt * lt / c + rt * rt / (m - c) - base[k]
                if g > best[k]:
                    best[k] = g
                    best_f[k] = f
                    best_thr[k] = 0.5 * (last[k] + x)
            left[k] += r[row]
            seen[k] = c + 1
            last[k] = x
    return best, best_f, best_thr, count


def _fit_tree(ps: _Presorted, r: np.ndarray, max_depth: int, min_leaf: int) -> RegressionTree:
    n = r.size
    scale = 1e-12 * max(1.0, float(np.dot(r, r)))
    node_of = np.zeros(n, dtype=np.int64)        # index into the open-node list
    open_ids = [0]                               # flat ids of open nodes
    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    value, gain = [float(np.mean(r))], [0.0]
    depth = 0
    while open_ids and depth < max_depth:
        g, f, thr, count = _level_splits(ps.sorted_x, ps.order, r, node_of, len(open_ids), min_leaf)
        next_ids = []
        new_of = np.full(n, -1, dtype=np.int64)
        for k, nid in enumerate(open_ids):
            if f[k] < 0 or not g[k] > scale or count[k] < 2 * min_leaf:
                continue
            members = node_of == k
            go_left = members & (ps.X[:, f[k]] <= thr[k])
            go_right = members & ~go_left
            feature[nid], threshold[nid], gain[nid] = int(f[k]), float(thr[k]), float(g[k])
            for side, mask in ((left, go_left), (right, go_right)):
                cid = len(feature)
                side[nid] = cid
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(float(np.mean(r[mask])))
                gain.append(0.0)
                new_of[mask] = len(next_ids)
                next_ids.append(cid)
        open_ids, node_of = next_ids, new_of
        depth += 1
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(value), np.array(gain), max_depth, min_leaf)


def fit_tree(X, residuals, depth: int, min_leaf: int = 1) -> RegressionTree:
    """Greedy least-squares regression tree; leaves predict the mean residual."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != r.size:
        raise GbmError(f"X has shape {X.shape} but there are {r.size} residuals")
    if r.size < max(2 * min_leaf, 1):
        raise GbmError(f"need at least {2 * min_leaf} rows for min_leaf={min_leaf}")
    return _fit_tree(_Presorted(X), r, depth, min_leaf)


# -- boosting --------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 100
    max_depth: int = 2
    shrinkage: float = 0.1
    min_leaf: int = 5

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise GbmError("n_trees and max_depth must be >= 0, min_leaf >= 1")
        if not 0.0 < self.shrinkage <= 1.0:
            raise GbmError("shrinkage must lie in (0, 1]")


@dataclass(eq=False)
class GbmModel:
    loss: str
    init_value: float
    trees: list[RegressionTree]
    shrinkage: float
    feature_names: list[str]
    importance: np.ndarray
    hyperparams: Hyperparams | None = None
    train_loss: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def raw_score(self, X, n_trees: int | None = None) -> np.ndarray:
        X = _check_X(X, self.n_features)
        score = np.full(X.shape[0], self.init_value)
        for tree in self.trees[:n_trees]:
            score += self.shrinkage * tree.predict(X)
        return score

    def staged_raw_scores(self, X):
        """Yield the raw score after 0, 1, ..., len(trees) trees."""
        X = _check_X(X, self.n_features)
        score = np.full(X.shape[0], self.init_value)
        yield score.copy()
        for tree in self.trees:
            score += self.shrinkage * tree.predict(X)
            yield score.copy()


def _check_X(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise GbmError(f"expected {n_features} columns, got shape {X.shape}")
    return X


def _link(loss, score):
    return sigmoid(score) if loss == "logistic" else score


def loss_value(loss: str, y, score) -> float:
    y = np.asarray(y, dtype=np.float64)
    if loss == "squared":
        return float(np.mean((y - score) ** 2))
    # log(1 + exp(-z)) for z = +-score, computed stably.
    z = np.where(y > 0.5, score, -score)
    return float(np.mean(np.logaddexp(0.0, -z)))


def _canonical_order(X, y) -> np.ndarray:
    """Row order that depends only on row contents, so fitting ignores input order."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys[::-1])


def gbm_fit(X, y, loss: str = "squared", hyperparams: Hyperparams = Hyperparams(),
            seed: int = 0, feature_names=None) -> GbmModel:
    """Sequential trees on the residuals of the current ensemble.

    ``seed`` is accepted for interface symmetry; fitting is fully deterministic
    (no subsampling), so it has no effect.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss not in LOSSES:
        raise GbmError(f"unknown loss {loss!r}")
    if X.ndim != 2 or X.shape[0] != y.size or y.size == 0:
        raise GbmError(f"X has shape {X.shape} but y has {y.size} entries")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise GbmError("X and y must be finite")
    if loss == "logistic" and not np.all((y == 0) | (y == 1)):
        raise GbmError("logistic loss needs 0/1 targets")
    names = list(feature_names) if feature_names is not None else (
        list(FEATURE_NAMES) if X.shape[1] == PROFILE_LEN else [f"x{j}" for j in range(X.shape[1])])
    if len(names) != X.shape[1]:
        raise GbmError("feature_names length does not match X")
    hp = hyperparams

    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    mean = float(np.mean(y))
    degenerate = bool(np.all(y == y[0]))
    if loss == "squared":
        init = mean
    elif degenerate:
        init = math.copysign(30.0, mean - 0.5)
    else:
        init = math.log(mean / (1.0 - mean))
    model = GbmModel(loss, init, [], hp.shrinkage, names, np.zeros(X.shape[1]), hp)
    score = np.full(y.size, init)
    model.train_loss.append(loss_value(loss, y, score))
    if degenerate:
        warnings.warn("all targets are equal; returning the constant model", stacklevel=2)
        return model
    if y.size < 2 * hp.min_leaf:
        warnings.warn("too few rows for any split; returning the constant model", stacklevel=2)
        return model
    ps = _Presorted(X)
    raw_importance = np.zeros(X.shape[1])
    for _ in range(hp.n_trees):
        resid = y - _link(loss, score)
        tree = _fit_tree(ps, resid, hp.max_depth, hp.min_leaf)
        inner = tree.feature >= 0
        np.add.at(raw_importance, tree.feature[inner], tree.gain[inner])
        model.trees.append(tree)
        score = score + hp.shrinkage * tree.predict(X)
        model.train_loss.append(loss_value(loss, y, score))
    total = raw_importance.sum()
    model.importance = 100.0 * raw_importance / total if total > 0 else raw_importance
    return model


def predict(model: GbmModel, X) -> np.ndarray:
    """Regression values, or case probabilities for logistic models."""
    return _link(model.loss, model.raw_score(X))


# -- persistence -----------------------------------------------------------------

def model_to_dict(model: GbmModel) -> dict:
    hp = model.hyperparams
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "layout_version": LAYOUT_VERSION,
        "loss": model.loss,
        "init": model.init_value,
        "shrinkage": model.shrinkage,
        "hyperparams": None if hp is None else {
            "n_trees": hp.n_trees, "max_depth": hp.max_depth,
            "shrinkage": hp.shrinkage, "min_leaf": hp.min_leaf},
        "feature_names": list(model.feature_names),
        "importance": model.importance.tolist(),
        "train_loss": list(model.train_loss),
        "trees": [{"max_depth": t.max_depth, "min_leaf": t.min_leaf, "nodes": t.to_list()}
                  for t in model.trees],
    }


def model_from_dict(obj: dict) -> GbmModel:
    if obj.get("format") != FORMAT_NAME:
        raise GbmError("not a GBM model file")
    if obj.get("version") != FORMAT_VERSION:
        raise GbmError(f"GBM file version {obj.get('version')!r}, expected {FORMAT_VERSION!r}")
    if obj.get("layout_version") != LAYOUT_VERSION:
        raise GbmError(f"GBM file layout_version {obj.get('layout_version')!r} does not match "
                       f"profile layout {LAYOUT_VERSION!r}")
    hp = obj.get("hyperparams")
    trees = [RegressionTree.from_list(t["nodes"], t["max_depth"], t["min_leaf"])
             for t in obj["trees"]]
    return GbmModel(obj["loss"], float(obj["init"]), trees, float(obj["shrinkage"]),
                    list(obj["feature_names"]), np.array(obj["importance"], dtype=np.float64),
                    Hyperparams(**hp) if hp else None, list(obj.get("train_loss", [])))


def save_gbm(model: GbmModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_gbm(path) -> GbmModel:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GbmError(f"{path}: cannot parse GBM file ({exc.msg})") from exc
    return model_from_dict(obj)


# -- tuning and assessment ---------------------------------------------------------

@dataclass(frozen=True)
class TuneGrid:
    n_trees: tuple[int, ...] = (50, 100, 200)
    max_depth: tuple[int, ...] = (1, 2, 3)
    shrinkage: tuple[float, ...] = (0.05, 0.1)
    min_leaf: tuple[int, ...] = (5,)

    def points(self) -> list[Hyperparams]:
        return [Hyperparams(n, d, s, m) for d, s, m, n in itertools.product(
            self.max_depth, self.shrinkage, self.min_leaf, self.n_trees)]

    def __post_init__(self):
        if not (self.n_trees and self.max_depth and self.shrinkage and self.min_leaf):
            raise GbmError("tuning grid is empty")


@dataclass(frozen=True)
class CvPlan:
    tune_folds: int = 3
    assess_folds: int = 5
    seed: int = 0


def patient_folds(patient_ids, n_folds: int, seed: int, salt: str = "assess") -> np.ndarray:
    """Fold index per record; patients are ordered by a seeded hash and dealt round-robin."""
    pids = [str(p) for p in patient_ids]
    unique = sorted(set(pids))
    if len(unique) < n_folds:
        raise GbmError(f"need at least {n_folds} patients for {n_folds}-fold CV, got {len(unique)}")
    keyed = sorted(unique, key=lambda p: hashlib.sha256(f"{seed}:{salt}:{p}".encode()).hexdigest())
    fold_of = {p: i % n_folds for i, p in enumerate(keyed)}
    return np.array([fold_of[p] for p in pids], dtype=np.int64)


def _cv_losses(X, y, pids, loss, grid: TuneGrid, plan: CvPlan, salt: str) -> dict:
    """Mean held-out loss per grid point, sharing one fit across n_trees values."""
    folds = patient_folds(pids, plan.tune_folds, plan.seed, salt=salt)
    max_trees = max(grid.n_trees)
    totals = {}
    for d, s, m in itertools.product(grid.max_depth, grid.shrinkage, grid.min_leaf):
        for k in range(plan.tune_folds):
            train, test = folds != k, folds == k
            model = gbm_fit(X[train], y[train], loss, Hyperparams(max_trees, d, s, m))
            staged = list(model.staged_raw_scores(X[test]))
            for n in grid.n_trees:
                score = staged[min(n, len(staged) - 1)]
                key = Hyperparams(n, d, s, m)
                totals[key] = totals.get(key, 0.0) + loss_value(loss, y[test], score) * test.sum()
    return {k: v / y.size for k, v in totals.items()}


def tune(X, y, pids, loss, grid: TuneGrid, plan: CvPlan, salt: str = "tune") -> Hyperparams:
    losses = _cv_losses(X, y, pids, loss, grid, plan, salt)
    best = None
    for hp in grid.points():
        if best is None or losses[hp] < losses[best]:
            best = hp
    return best


@dataclass(eq=False)
class AssessResult:
    best_hyperparams: Hyperparams
    fold_hyperparams: list[Hyperparams]
    oof: np.ndarray
    folds: np.ndarray
    fold_models: list[GbmModel]
    final_model: GbmModel


def tune_and_assess(X, y, patient_ids, loss: str = "squared", grid: TuneGrid = TuneGrid(),
                    cv: CvPlan = CvPlan(), *, log=None) -> AssessResult:
    """Outer patient-grouped folds for out-of-fold estimates, inner folds for tuning."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pids = [str(p) for p in patient_ids]
    if len(pids) != y.size or X.shape[0] != y.size:
        raise GbmError("X, y and patient_ids must have the same number of rows")
    if len(set(pids)) < cv.assess_folds:
        raise GbmError(f"need at least {cv.assess_folds} patients, got {len(set(pids))}")
    grid.points()
    folds = patient_folds(pids, cv.assess_folds, cv.seed, salt="assess")
    oof = np.full(y.size, np.nan)
    fold_hps, fold_models = [], []
    for k in range(cv.assess_folds):
        train = folds != k
        sub_pids = [p for p, t in zip(pids, train) if t]
        hp = tune(X[train], y[train], sub_pids, loss, grid, cv, salt=f"tune{k}")
        model = gbm_fit(X[train], y[train], loss, hp)
        oof[~train] = predict(model, X[~train])
        fold_hps.append(hp)
        fold_models.append(model)
        if log is not None:
            log(k, hp)
    counts = Counter(fold_hps)
    order = grid.points()
    top = max(counts.values())
    best = next(hp for hp in order if counts.get(hp, 0) == top)
    final = gbm_fit(X, y, loss, best)
    return AssessResult(best, fold_hps, oof, folds, fold_models, final)


# -- importance --------------------------------------------------------------------

def bin_names() -> list[str]:
    names = list(INTERVAL_NAMES)
    for seg in SEGMENT_NAMES:
        for lead in LEAD_NAMES:
            names.extend(f"{seg} {lead} seg {4 * g}-{4 * (g + 1)}" for g in range(N_BINS // 4))
    return names


BIN_NAMES: tuple[str, ...] = tuple(bin_names())


def bin_importance(importance) -> np.ndarray:
    """Sum each lead-segment's 20 pixels into 5 groups of 4; intervals pass through."""
    imp = np.asarray(importance, dtype=np.float64)
    if imp.shape != (PROFILE_LEN,):
        raise GbmError(f"importance must have {PROFILE_LEN} entries")
    n_int = len(INTERVAL_NAMES)
    pixels = imp[n_int:].reshape(-1, N_BINS // 4, 4).sum(axis=2).ravel()
    return np.concatenate([imp[:n_int], pixels])


@dataclass(frozen=True, eq=False)
class ImportanceReport:
    importance: np.ndarray
    binned: np.ndarray
    names: tuple[str, ...] = BIN_NAMES

    def top(self, k: int = 10) -> list[tuple[str, float]]:
        order = np.argsort(-self.binned, kind="stable")[:k]
        return [(self.names[i], float(self.binned[i])) for i in order]


def variable_importance(models) -> ImportanceReport:
    """Average of per-model importances (each summing to 100), plus the binned view."""
    models = list(models)
    if not models:
        raise GbmError("no models given")
    stacked = np.stack([np.asarray(m.importance, dtype=np.float64) for m in models])
    mean = stacked.mean(axis=0)
    return ImportanceReport(mean, bin_importance(mean))


# -- dichotomization ---------------------------------------------------------------

def make_dichotomous_labels(values, direction: str = "high_is_case", tail: float = 0.10
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Cases in the outer 10% tail, controls on the other side of the median.

    Returns ``(is_case, included)``; rows with ``included == False`` are the
    excluded middle.  Quantiles are linear interpolation between order statistics.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 10:
        raise GbmError("need at least 10 values to dichotomize")
    median = float(np.quantile(v, 0.5))
    if direction == "high_is_case":
        cut = float(np.quantile(v, 1.0 - tail))
        case, control = v > cut, v < median
    elif direction == "low_is_case":
        cut = float(np.quantile(v, tail))
        case, control = v < cut, v > median
    else:
        raise GbmError(f"unknown direction {direction!r}")
    if cut == median or not case.any() or not control.any():
        raise GbmError("degenerate distribution: tail cut-off coincides with the median")
    return case, case | control
