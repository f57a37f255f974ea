"""Beat delineation, interval measurement and the 725-element ECG profile.

Profile layout (``LAYOUT_VERSION``):

* 0-4: heart rate (bpm), P duration, PR interval, QRS duration, QT interval (ms)
* 5-724: three morphology blocks, P-PR, QRS and ST-T, each ordered by lead
  (canonical order) then by the 20 resized samples, in mV.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LEAD_NAMES, LEADS, EcgRecord, LabelSequence, SegmentClass, runs

LAYOUT_VERSION = "1"
N_BINS = 20
INTERVAL_NAMES = ("heart_rate", "p_dur", "pr_interval", "qrs_dur", "qt_interval")
SEGMENT_NAMES = ("P-PR", "QRS", "ST-T")
PROFILE_LEN = len(INTERVAL_NAMES) + len(SEGMENT_NAMES) * len(LEADS) * N_BINS
METADATA_COLUMNS = ("record_id", "patient_id", "acquired_date")

_BEAT_ORDER = (SegmentClass.PWave, SegmentClass.PRSegment, SegmentClass.QRS,
               SegmentClass.STSegment, SegmentClass.TWave)


class MeasureError(ValueError):
    pass


def feature_names() -> list[str]:
    names = list(INTERVAL_NAMES)
    for seg in SEGMENT_NAMES:
        for lead in LEAD_NAMES:
            names.extend(f"{seg} {lead} px{k}" for k in range(N_BINS))
    return names


FEATURE_NAMES: tuple[str, ...] = tuple(feature_names())


def feature_index(segment: str, lead: str, pixel: int) -> int:
    s = SEGMENT_NAMES.index(segment)
    lead_i = LEAD_NAMES.index(lead)
    return len(INTERVAL_NAMES) + (s * len(LEADS) + lead_i) * N_BINS + pixel


@dataclass(frozen=True)
class Beat:
    """Half-open [start, stop) spans of one complete beat, anchored at QRS onset."""

    p: tuple[int, int]
    pr: tuple[int, int]
    qrs: tuple[int, int]
    st: tuple[int, int]
    t: tuple[int, int]

    @property
    def anchor(self) -> int:
        return self.qrs[0]


@dataclass(frozen=True)
class BeatSegmentation:
    beats: tuple[Beat, ...]
    qrs_onsets: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.qrs_onsets:
            object.__setattr__(self, "qrs_onsets", tuple(b.anchor for b in self.beats))

    def __len__(self):
        return len(self.beats)


def delineate_beats(labels) -> BeatSegmentation:
    """Group label runs into complete P, PR, QRS, ST, T beats."""
    c = labels.classes if isinstance(labels, LabelSequence) else np.asarray(labels)
    if c.size == 0:
        raise MeasureError("label sequence is empty")
    rs = runs(c)
    kinds = [r[0] for r in rs]
    beats = []
    onsets = []
    for i, (cls, start, stop) in enumerate(rs):
        if cls != SegmentClass.QRS:
            continue
        onsets.append(start)
        if i < 2 or i + 2 >= len(rs):
            continue
        if tuple(kinds[i - 2:i + 3]) != tuple(int(k) for k in _BEAT_ORDER):
            continue
        spans = [(rs[j][1], rs[j][2]) for j in range(i - 2, i + 3)]
        beats.append(Beat(*spans))
    return BeatSegmentation(tuple(beats), tuple(onsets))


@dataclass(frozen=True)
class IntervalSet:
    heart_rate: float
    p_dur: float
    pr_interval: float
    qrs_dur: float
    qt_interval: float
    n_beats_used: int

    def as_array(self) -> np.ndarray:
        return np.array([self.heart_rate, self.p_dur, self.pr_interval, self.qrs_dur,
                         self.qt_interval])


def compute_intervals(beats: BeatSegmentation) -> IntervalSet:
    """Cycle-averaged intervals; heart rate from the mean spacing of QRS onsets."""
    if len(beats.beats) < 2:
        raise MeasureError(f"need at least 2 complete beats, got {len(beats.beats)}")
    onsets = np.array(sorted(beats.qrs_onsets), dtype=np.float64)
    if onsets.size < 2:
        onsets = np.array([b.anchor for b in beats.beats], dtype=np.float64)
    rr = float(np.mean(np.diff(onsets)))
    if rr <= 0:
        raise MeasureError("QRS onsets do not advance")
    p = np.mean([b.p[1] - b.p[0] for b in beats.beats])
    pr = np.mean([b.qrs[0] - b.p[0] for b in beats.beats])
    qrs = np.mean([b.qrs[1] - b.qrs[0] for b in beats.beats])
    qt = np.mean([b.t[1] - b.qrs[0] for b in beats.beats])
    return IntervalSet(60000.0 / rr, float(p), float(pr), float(qrs), float(qt),
                       len(beats.beats))


AGREEMENT_FIELDS = ("heart_rate", "pr_interval", "qrs_dur", "qt_interval")


def interval_agreement(a: IntervalSet, b: IntervalSet) -> float:
    """Mean of |a - b| / b over heart rate, PR, QRS and QT; ``b`` is the reference."""
    total = 0.0
    for name in AGREEMENT_FIELDS:
        ref = getattr(b, name)
        if ref == 0:
            raise MeasureError(f"reference {name} is zero")
        total += abs(getattr(a, name) - ref) / abs(ref)
    return total / len(AGREEMENT_FIELDS)


def passes_quality_gate(a: IntervalSet, b: IntervalSet, threshold: float = 0.10) -> bool:
    return interval_agreement(a, b) < threshold


def resize_to_20(samples, n: int = N_BINS) -> np.ndarray:
    """Linear interpolation onto ``n`` equally spaced points spanning first..last."""
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise MeasureError("need at least 2 samples to resize")
    return np.interp(np.linspace(0.0, y.size - 1, n), np.arange(y.size), y)


def _beat_spans(beat: Beat) -> tuple[tuple[int, int], ...]:
    return ((beat.p[0], beat.qrs[0]), beat.qrs, (beat.qrs[1], beat.t[1]))


@dataclass(frozen=True, eq=False)
class EcgProfile:
    values: np.ndarray
    record_id: str = ""
    patient_id: str = ""
    acquired_date: dt.date | None = None
    intervals: IntervalSet | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (PROFILE_LEN,):
            raise MeasureError(f"profile must have {PROFILE_LEN} entries, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MeasureError("profile contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "patient_id": self.patient_id,
            "acquired_date": self.acquired_date.isoformat() if self.acquired_date else None,
            "layout_version": LAYOUT_VERSION,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EcgProfile":
        version = obj.get("layout_version")
        if version != LAYOUT_VERSION:
            raise MeasureError(
                f"profile layout_version {version!r} does not match supported {LAYOUT_VERSION!r}")
        date = obj.get("acquired_date")
        return cls(np.array(obj["values"]), obj.get("record_id", ""), obj.get("patient_id", ""),
                   dt.date.fromisoformat(date) if date else None)


def build_profile(record: EcgRecord, labels) -> EcgProfile:
    """Intervals plus beat-averaged, 20-point resized voltages per segment and lead."""
    if record.sampling_hz != 1000:
        raise MeasureError("build_profile needs a 1 kHz record")
    seg = delineate_beats(labels)
    usable = [b for b in seg.beats if all(stop - start >= 2 for start, stop in _beat_spans(b))]
    if len(usable) < 2:
        raise MeasureError(f"need at least 2 complete beats, found {len(usable)}")
    seg = BeatSegmentation(tuple(usable), seg.qrs_onsets)
    intervals = compute_intervals(seg)
    x = record.matrix()
    if x.shape[1] < max(b.t[1] for b in usable):
        raise MeasureError("labels extend past the end of the record")
    blocks = np.zeros((len(SEGMENT_NAMES), len(LEADS), N_BINS))
    for beat in usable:
        for s, (start, stop) in enumerate(_beat_spans(beat)):
            for li in range(len(LEADS)):
                blocks[s, li] += resize_to_20(x[li, start:stop])
    blocks /= len(usable)
    values = np.concatenate([intervals.as_array(), blocks.ravel()])
    return EcgProfile(values, record.record_id, record.patient_id, record.acquired_date,
                      intervals)


# -- files -----------------------------------------------------------------------

def write_profile_file(profile: EcgProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict()) + "\n")


def read_profile_file(path) -> EcgProfile:
    return EcgProfile.from_dict(json.loads(Path(path).read_text()))


def write_profile_table(profiles, path) -> None:
    """Cohort CSV: metadata columns, then one column per feature name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layout_version", *METADATA_COLUMNS, *FEATURE_NAMES])
        for p in profiles:
            date = p.acquired_date.isoformat() if p.acquired_date else ""
            w.writerow([LAYOUT_VERSION, p.record_id, p.patient_id, date,
                        *(repr(float(v)) for v in p.values)])


@dataclass(frozen=True, eq=False)
class ProfileTable:
    record_ids: list[str]
    patient_ids: list[str]
    dates: list[dt.date | None]
    X: np.ndarray


def read_profile_table(path) -> ProfileTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MeasureError(f"{path}: empty profile table")
    header = rows[0]
    expected = ["layout_version", *METADATA_COLUMNS, *FEATURE_NAMES]
    if header != expected:
        raise MeasureError(f"{path}: header does not match profile layout {LAYOUT_VERSION}")
    ids, pids, dates, X = [], [], [], []
    for row in rows[1:]:
        if row[0] != LAYOUT_VERSION:
            raise MeasureError(
                f"{path}: row layout_version {row[0]!r} does not match supported {LAYOUT_VERSION!r}")
        ids.append(row[1])
        pids.append(row[2])
        dates.append(dt.date.fromisoformat(row[3]) if row[3] else None)
        X.append([float(v) for v in row[4:]])
    return ProfileTable(ids, pids, dates, np.array(X, dtype=np.float64).reshape(-1, PROFILE_LEN))
