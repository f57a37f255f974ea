"""Six-state cyclic HMM that cleans up the network's per-step argmax stream.

States are the segment classes in physiologic order.  A state may only stay
put or advance to its successor, so the decoded path always walks
P -> PR -> QRS -> ST -> T -> TP -> P.  Observations are the network's argmax
classes; the emission matrix records how the network confuses them.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import N_CLASSES, LabelSequence, SegmentClass, class_order_stamp, runs

DEFAULT_FLOOR = 1e-6
FORMAT_NAME = "ecgai-hmm"
FORMAT_VERSION = "1"


class HmmError(ValueError):
    pass


def cyclic_mask(n: int = N_CLASSES) -> np.ndarray:
    """Allowed transitions: self-loop or advance to the successor."""
    mask = np.eye(n, dtype=bool)
    mask[np.arange(n), (np.arange(n) + 1) % n] = True
    return mask


@dataclass(frozen=True, eq=False)
class HmmParams:
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        pi = np.array(self.initial, dtype=np.float64)
        A = np.array(self.transition, dtype=np.float64)
        B = np.array(self.emission, dtype=np.float64)
        n = N_CLASSES
        if pi.shape != (n,) or A.shape != (n, n) or B.shape != (n, n):
            raise HmmError("HMM needs a 6-vector and two 6 x 6 matrices")
        for name, m in (("initial", pi), ("transition", A), ("emission", B)):
            if np.any(m < 0) or not np.all(np.isfinite(m)):
                raise HmmError(f"{name} probabilities must be finite and non-negative")
            if not np.allclose(m.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
                raise HmmError(f"{name} probabilities must sum to 1")
        if np.any(A[~cyclic_mask(n)] != 0):
            raise HmmError("transition matrix allows a move outside the cyclic order")
        for name, m in (("initial", pi), ("transition", A), ("emission", B)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n_states(self) -> int:
        return N_CLASSES

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "class_order": class_order_stamp(),
            "floor": self.floor,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HmmParams":
        if obj.get("format") != FORMAT_NAME:
            raise HmmError("not an HMM parameter file")
        if obj.get("version") != FORMAT_VERSION:
            raise HmmError(f"HMM file version {obj.get('version')!r}, expected {FORMAT_VERSION!r}")
        if obj.get("class_order") != class_order_stamp():
            raise HmmError("HMM file was written with a different class order")
        return cls(np.array(obj["initial"]), np.array(obj["transition"]),
                   np.array(obj["emission"]), float(obj["floor"]))


def save_hmm(params: HmmParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), sort_keys=True) + "\n")


def load_hmm(path) -> HmmParams:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise HmmError(f"{path}: cannot parse HMM file ({exc.msg})") from exc
    return HmmParams.from_dict(obj)


def _classes(seq) -> np.ndarray:
    if isinstance(seq, LabelSequence):
        return seq.classes.astype(np.int64)
    return np.asarray(seq, dtype=np.int64)


def estimate_transitions(labeled, floor: float = DEFAULT_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Initial distribution from state occupancy; cyclic transitions from bigram counts."""
    seqs = [_classes(s) for s in labeled]
    if not seqs or any(s.size == 0 for s in seqs):
        raise HmmError("need at least one non-empty label sequence")
    n = N_CLASSES
    mask = cyclic_mask(n)
    occupancy = np.zeros(n)
    counts = np.zeros((n, n))
    for s in seqs:
        occupancy += np.bincount(s, minlength=n)
        np.add.at(counts, (s[:-1], s[1:]), 1.0)
    pi = occupancy + floor
    pi /= pi.sum()
    counts[~mask] = 0.0
    A = np.where(mask, counts + floor, 0.0)
    row = A.sum(axis=1)
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        names = ", ".join(SegmentClass(i).name for i in np.flatnonzero(empty))
        warnings.warn(f"no observed transitions out of {names}; using uniform allowed moves",
                      stacklevel=2)
        A[empty] = mask[empty] / mask[empty].sum(axis=1, keepdims=True)
        row = A.sum(axis=1)
    return pi, A / row[:, None]


def estimate_emissions(truth, predicted, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Row-normalized confusion counts B[true, observed] with an additive floor."""
    truth = [_classes(s) for s in truth]
    predicted = [_classes(s) for s in predicted]
    if not truth or len(truth) != len(predicted):
        raise HmmError("need equally many truth and predicted sequences (at least one)")
    n = N_CLASSES
    counts = np.zeros((n, n))
    for t, p in zip(truth, predicted):
        if t.shape != p.shape:
            raise HmmError(f"paired sequences differ in length ({t.size} vs {p.size})")
        np.add.at(counts, (t, p), 1.0)
    empty = counts.sum(axis=1) == 0
    if np.any(empty):
        names = ", ".join(SegmentClass(i).name for i in np.flatnonzero(empty))
        warnings.warn(f"state(s) {names} never occur in the truth; emissions set uniform",
                      stacklevel=2)
        counts[empty] = 1.0
    B = counts + floor
    return B / B.sum(axis=1, keepdims=True)


def fit_hmm(truth, predicted, floor: float = DEFAULT_FLOOR) -> HmmParams:
    pi, A = estimate_transitions(truth, floor)
    B = estimate_emissions(truth, predicted, floor)
    return HmmParams(pi, A, B, floor)


@dataclass(frozen=True)
class DecodeResult:
    states: LabelSequence
    log_prob: float


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def viterbi_decode(params: HmmParams, observations) -> DecodeResult:
    """Exact most probable state path; ties go to the lower state index."""
    obs = _classes(observations)
    if obs.size == 0:
        raise HmmError("observation sequence is empty")
    log_pi = _log(params.initial)
    log_A = _log(params.transition)
    log_B = _log(params.emission)[:, obs].T          # (T, states)
    T, n = log_B.shape
    back = np.empty((T, n), dtype=np.int8)
    delta = log_pi + log_B[0]
    for t in range(1, T):
        scores = delta[:, None] + log_A               # from i (rows) to j (cols)
        best = scores.argmax(axis=0)
        back[t] = best
        delta = scores[best, np.arange(n)] + log_B[t]
    last = int(delta.argmax())
    log_prob = float(delta[last])
    if not np.isfinite(log_prob):
        raise HmmError("no state path has non-zero probability for these observations")
    path = np.empty(T, dtype=np.int8)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    record_id = observations.record_id if isinstance(observations, LabelSequence) else ""
    start = observations.start_ms if isinstance(observations, LabelSequence) else 0
    return DecodeResult(LabelSequence(path, record_id, start), log_prob)


def path_log_prob(params: HmmParams, states, observations) -> float:
    """Joint log-probability of a state path and the observations."""
    s = _classes(states)
    o = _classes(observations)
    lp = _log(params.initial)[s[0]] + _log(params.emission)[s, o].sum()
    if s.size > 1:
        lp += _log(params.transition)[s[:-1], s[1:]].sum()
    return float(lp)


def duration_filter(states, min_ms: int = 10) -> LabelSequence:
    """Absorb runs shorter than ``min_ms`` into their predecessor until none remain."""
    c = _classes(states).copy()
    if c.size == 0:
        raise HmmError("state sequence is empty")
    while True:
        rs = runs(c)
        if len(rs) == 1 or all(stop - start >= min_ms for _, start, stop in rs):
            break
        for i, (_, start, stop) in enumerate(rs):
            if stop - start >= min_ms:
                continue
            if start == 0:
                c[start:stop] = c[stop]
            else:
                c[start:stop] = c[start - 1]
    record_id = states.record_id if isinstance(states, LabelSequence) else ""
    start_ms = states.start_ms if isinstance(states, LabelSequence) else 0
    return LabelSequence(c, record_id, start_ms)


# -- record-level segmentation ------------------------------------------------------

def window_starts(n_samples: int, window: int) -> list[int]:
    """Overlap-free tiling; the last window is right-aligned to the record end."""
    if n_samples <= window:
        return [0]
    starts = list(range(0, n_samples - window + 1, window))
    if starts[-1] + window < n_samples:
        starts.append(n_samples - window)
    return starts


def network_argmax(model, record, batch_size: int = 8) -> np.ndarray:
    """Per-millisecond argmax of the network over a whole 1 kHz record."""
    from .core import resample_to_1khz
    from .nnseg import predict_proba

    record = resample_to_1khz(record)
    x = record.matrix()
    n = x.shape[1]
    L = model.config.input_len
    if n < L:
        x = np.pad(x, ((0, 0), (0, L - n)))
    starts = window_starts(n, L)
    out = np.empty(max(n, L), dtype=np.int8)
    filled = 0
    for b in range(0, len(starts), batch_size):
        chunk = starts[b:b + batch_size]
        probs = predict_proba(model, np.stack([x[:, s:s + L] for s in chunk]))
        for s, p in zip(chunk, probs):
            out[filled:s + L] = p[filled - s:].argmax(axis=1)
            filled = s + L
    return out[:n]


def segment(model, params: HmmParams, record, *, min_ms: int = 10) -> LabelSequence:
    """Network argmax, Viterbi smoothing over the whole record, then the duration filter."""
    obs = network_argmax(model, record)
    decoded = viterbi_decode(params, obs)
    return duration_filter(LabelSequence(decoded.states.classes, record.record_id, 0), min_ms)
