"""Domain types, record IO, resampling and windowing.

Everything downstream works on 1 kHz records so that one sample is one
millisecond and label sequences line up with voltages index for index.
"""
from __future__ import annotations

import datetime as dt
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


class LeadId(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    aVR = "aVR"
    aVL = "aVL"
    aVF = "aVF"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"
    V5 = "V5"
    V6 = "V6"


LEADS: tuple[LeadId, ...] = tuple(LeadId)
LEAD_NAMES: tuple[str, ...] = tuple(lead.value for lead in LEADS)


class SegmentClass(enum.IntEnum):
    """The six phases of a sinus beat, in cyclic order."""

    PWave = 0
    PRSegment = 1
    QRS = 2
    STSegment = 3
    TWave = 4
    TPSegment = 5

    @property
    def successor(self) -> "SegmentClass":
        return SegmentClass((self.value + 1) % N_CLASSES)

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]


N_CLASSES = 6
_SHORT_NAMES = {
    SegmentClass.PWave: "P",
    SegmentClass.PRSegment: "PR",
    SegmentClass.QRS: "QRS",
    SegmentClass.STSegment: "ST",
    SegmentClass.TWave: "T",
    SegmentClass.TPSegment: "TP",
}

SUPPORTED_RATES = (250, 500, 1000)


class RecordError(ValueError):
    """Raised for malformed or invalid record and label files."""


@dataclass(frozen=True, eq=False)
class EcgRecord:
    record_id: str
    patient_id: str
    acquired_date: dt.date
    sampling_hz: int
    leads: Mapping[LeadId, np.ndarray]

    def __post_init__(self):
        if self.sampling_hz not in SUPPORTED_RATES:
            raise RecordError(f"unsupported sampling rate {self.sampling_hz} Hz")
        missing = [lead.value for lead in LEADS if lead not in self.leads]
        if missing:
            raise RecordError(f"missing lead(s): {', '.join(missing)}")
        arrays = {}
        n = None
        for lead in LEADS:
            a = np.array(self.leads[lead], dtype=np.float64)
            if a.ndim != 1 or a.size < 1:
                raise RecordError(f"lead {lead.value} must be a non-empty 1-D series")
            if not np.all(np.isfinite(a)):
                raise RecordError(f"lead {lead.value} contains non-finite samples")
            if n is None:
                n = a.size
            elif a.size != n:
                raise RecordError(f"lead {lead.value} has {a.size} samples, expected {n}")
            a.setflags(write=False)
            arrays[lead] = a
        object.__setattr__(self, "leads", arrays)

    @property
    def n_samples(self) -> int:
        return self.leads[LeadId.I].size

    @property
    def duration_ms(self) -> float:
        return (self.n_samples - 1) * 1000.0 / self.sampling_hz

    def matrix(self) -> np.ndarray:
        """12 x n voltage matrix in canonical lead order."""
        return np.stack([self.leads[lead] for lead in LEADS])

    @classmethod
    def from_matrix(cls, matrix, *, record_id="", patient_id="", acquired_date=None,
                    sampling_hz=1000) -> "EcgRecord":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(LEADS):
            raise RecordError(f"expected a 12 x n matrix, got shape {matrix.shape}")
        if acquired_date is None:
            acquired_date = dt.date(2000, 1, 1)
        return cls(record_id, patient_id, acquired_date, sampling_hz,
                   {lead: matrix[i] for i, lead in enumerate(LEADS)})

    def scaled(self, factor: float) -> "EcgRecord":
        return EcgRecord(self.record_id, self.patient_id, self.acquired_date, self.sampling_hz,
                         {lead: v * factor for lead, v in self.leads.items()})

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.record_id == other.record_id
                and self.patient_id == other.patient_id
                and self.acquired_date == other.acquired_date
                and self.sampling_hz == other.sampling_hz
                and all(np.array_equal(self.leads[k], other.leads[k]) for k in LEADS))


@dataclass(frozen=True, eq=False)
class LabelSequence:
    """Per-millisecond segment classes for a window starting at ``start_ms``."""

    classes: np.ndarray
    record_id: str = ""
    start_ms: int = 0

    def __post_init__(self):
        c = np.array(self.classes, dtype=np.int8)
        if c.ndim != 1 or c.size < 1:
            raise RecordError("label sequence must be a non-empty 1-D array")
        if c.min() < 0 or c.max() >= N_CLASSES:
            raise RecordError("label codes must lie in 0..5")
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    def __len__(self):
        return self.classes.size

    @property
    def length(self) -> int:
        return self.classes.size

    def __eq__(self, other):
        if not isinstance(other, LabelSequence):
            return NotImplemented
        return (self.record_id == other.record_id and self.start_ms == other.start_ms
                and np.array_equal(self.classes, other.classes))


def runs(classes) -> list[tuple[int, int, int]]:
    """Maximal runs as (class, start, stop) with stop exclusive."""
    c = np.asarray(classes)
    if c.size == 0:
        return []
    edges = np.flatnonzero(np.diff(c)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [c.size]])
    return [(int(c[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def resample_to_1khz(record: EcgRecord) -> EcgRecord:
    if record.sampling_hz not in SUPPORTED_RATES:
        raise RecordError(f"unsupported sampling rate {record.sampling_hz} Hz")
    if record.sampling_hz == 1000:
        return record
    step = 1000 // record.sampling_hz
    n = record.n_samples
    src_t = np.arange(n) * step
    dst_t = np.arange((n - 1) * step + 1)
    leads = {lead: np.interp(dst_t, src_t, v) for lead, v in record.leads.items()}
    return EcgRecord(record.record_id, record.patient_id, record.acquired_date, 1000, leads)


def extract_window(record: EcgRecord, start_ms: int, len_ms: int) -> np.ndarray:
    if record.sampling_hz != 1000:
        raise RecordError("extract_window needs a 1 kHz record; call resample_to_1khz first")
    if len_ms < 1 or start_ms < 0 or start_ms + len_ms > record.n_samples:
        raise RecordError(
            f"window [{start_ms}, {start_ms + len_ms}) outside record of {record.n_samples} ms")
    return record.matrix()[:, start_ms:start_ms + len_ms]


# -- file IO -----------------------------------------------------------------

def _require(obj: dict, key: str, kind):
    if key not in obj:
        raise RecordError(f"missing field '{key}'")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise RecordError(f"field '{key}' has wrong type {type(value).__name__}")
    return value


def record_to_dict(record: EcgRecord) -> dict:
    return {
        "record_id": record.record_id,
        "patient_id": record.patient_id,
        "acquired_date": record.acquired_date.isoformat(),
        "sampling_hz": record.sampling_hz,
        "units": "mV",
        "leads": {lead.value: record.leads[lead].tolist() for lead in LEADS},
    }


def record_from_dict(obj: dict) -> EcgRecord:
    if not isinstance(obj, dict):
        raise RecordError("record file must hold a JSON object")
    record_id = _require(obj, "record_id", str)
    patient_id = _require(obj, "patient_id", str)
    date_text = _require(obj, "acquired_date", str)
    try:
        acquired = dt.date.fromisoformat(date_text)
    except ValueError as exc:
        raise RecordError(f"field 'acquired_date' is not an ISO-8601 date: {date_text!r}") from exc
    rate = _require(obj, "sampling_hz", int)
    units = obj.get("units", "mV")
    if units != "mV":
        raise RecordError(f"field 'units' must be 'mV', got {units!r}")
    leads_obj = _require(obj, "leads", dict)
    leads = {}
    for lead in LEADS:
        if lead.value not in leads_obj:
            raise RecordError(f"missing lead(s): {lead.value}")
        values = leads_obj[lead.value]
        if not isinstance(values, list):
            raise RecordError(f"field 'leads.{lead.value}' must be an array")
        try:
            leads[lead] = np.array(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise RecordError(f"field 'leads.{lead.value}' holds non-numeric samples") from exc
    return EcgRecord(record_id, patient_id, acquired, rate, leads)


def _dump_json(obj, path) -> None:
    text = json.dumps(obj, separators=(",", ":"), allow_nan=False)
    Path(path).write_text(text + "\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(), parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise RecordError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc


def _reject_constant(name):
    raise RecordError(f"non-finite sample '{name}' in file")


def write_record_file(record: EcgRecord, path) -> None:
    _dump_json(record_to_dict(record), path)


def read_record_file(path) -> EcgRecord:
    return record_from_dict(_load_json(path))


def write_label_file(labels: LabelSequence, path) -> None:
    _dump_json({"record_id": labels.record_id, "start_ms": labels.start_ms,
                "classes": labels.classes.tolist()}, path)


def read_label_file(path) -> LabelSequence:
    obj = _load_json(path)
    if not isinstance(obj, dict):
        raise RecordError("label file must hold a JSON object")
    record_id = _require(obj, "record_id", str)
    start = _require(obj, "start_ms", int)
    classes = _require(obj, "classes", list)
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in classes):
        raise RecordError("field 'classes' must hold integer codes")
    return LabelSequence(np.array(classes, dtype=np.int64), record_id, start)


def class_order_stamp() -> list[str]:
    return [c.name for c in SegmentClass]
