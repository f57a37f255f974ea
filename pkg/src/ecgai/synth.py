"""Parametric 12-lead ECG generator with exact per-millisecond labels.

A record is a train of beats laid out as TP, P, PR, QRS, ST, T.  The P and
T waves are Gaussian bumps shifted so they return to zero at their segment
edges; the QRS is piecewise linear through Q, R, S and a terminal knot that
carries the R' deflection in V1.  Labels come from the same integer segment
boundaries used to draw the waveform, so the two agree exactly.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import LEADS, EcgRecord, LabelSequence, LeadId, SegmentClass

# QRS knot positions as fractions of the complex width.
QRS_KNOTS = (0.0, 0.15, 0.40, 0.65, 0.85, 1.0)
R_KNOT = QRS_KNOTS[2]
RPRIME_KNOT = QRS_KNOTS[4]
# Bump width (sd as a fraction of the wave duration) for P and T.
BUMP_SD = 0.25
TERMINAL_FRACTION = 0.3


@dataclass(frozen=True)
class LeadAmplitudes:
    p: float
    q: float
    r: float
    s: float
    t: float


# Rough adult sinus morphology per lead (mV).
BASE_AMPLITUDES: dict[LeadId, LeadAmplitudes] = {
    LeadId.I: LeadAmplitudes(0.10, -0.05, 0.80, -0.10, 0.25),
    LeadId.II: LeadAmplitudes(0.15, -0.05, 1.20, -0.15, 0.30),
    LeadId.III: LeadAmplitudes(0.05, -0.03, 0.50, -0.10, 0.10),
    LeadId.aVR: LeadAmplitudes(-0.10, 0.00, 0.10, -0.90, -0.25),
    LeadId.aVL: LeadAmplitudes(0.05, -0.03, 0.40, -0.10, 0.10),
    LeadId.aVF: LeadAmplitudes(0.10, -0.03, 0.80, -0.10, 0.20),
    LeadId.V1: LeadAmplitudes(0.08, 0.00, 0.25, -0.90, 0.10),
    LeadId.V2: LeadAmplitudes(0.10, 0.00, 0.50, -1.20, 0.40),
    LeadId.V3: LeadAmplitudes(0.10, 0.00, 0.80, -0.80, 0.45),
    LeadId.V4: LeadAmplitudes(0.10, -0.05, 1.30, -0.40, 0.40),
    LeadId.V5: LeadAmplitudes(0.10, -0.07, 1.20, -0.20, 0.30),
    LeadId.V6: LeadAmplitudes(0.10, -0.07, 0.90, -0.10, 0.25),
}


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class BeatParams:
    heart_rate_bpm: float = 70.0
    p_dur_ms: float = 100.0
    pr_seg_ms: float = 70.0
    qrs_ms: float = 90.0
    st_ms: float = 100.0
    t_ms: float = 160.0
    amplitudes: dict = field(default_factory=lambda: dict(BASE_AMPLITUDES))
    rprime_v1_amp: float = 0.0
    noise_sd: float = 0.0
    jitter_frac: float = 0.0

    def __post_init__(self):
        durs = self.durations()
        if not all(math.isfinite(d) and d > 0 for d in durs):
            raise ParamError("segment durations must be positive and finite")
        if not (math.isfinite(self.heart_rate_bpm) and self.heart_rate_bpm > 0):
            raise ParamError("heart rate must be positive")
        if sum(durs) >= self.rr_ms:
            raise ParamError(
                f"segment durations sum to {sum(durs):.1f} ms, not below RR {self.rr_ms:.1f} ms")
        if self.noise_sd < 0 or self.rprime_v1_amp < 0:
            raise ParamError("noise_sd and rprime_v1_amp must be non-negative")
        if not 0.0 <= self.jitter_frac <= 0.2:
            raise ParamError("jitter_frac must lie in [0, 0.2]")
        if set(self.amplitudes) != set(LEADS):
            raise ParamError("amplitude table must cover all 12 leads")
        for amp in self.amplitudes.values():
            if not all(math.isfinite(v) for v in dataclasses.astuple(amp)):
                raise ParamError("amplitudes must be finite")

    @property
    def rr_ms(self) -> float:
        return 60000.0 / self.heart_rate_bpm

    def durations(self) -> tuple[float, float, float, float, float]:
        return (self.p_dur_ms, self.pr_seg_ms, self.qrs_ms, self.st_ms, self.t_ms)

    def replace(self, **kw) -> "BeatParams":
        return dataclasses.replace(self, **kw)

    def mean_r_amplitude(self, leads=(LeadId.I, LeadId.aVL, LeadId.V5, LeadId.V6)) -> float:
        return float(np.mean([self.amplitudes[lead].r for lead in leads]))


@dataclass(frozen=True)
class Beat:
    """Integer segment boundaries (ms) of one generated beat."""

    p_on: int
    pr_on: int
    qrs_on: int
    st_on: int
    t_on: int
    t_off: int

    @property
    def r_peak(self) -> float:
        return self.qrs_on + R_KNOT * (self.st_on - self.qrs_on)

    @property
    def rprime_peak(self) -> float:
        return self.qrs_on + RPRIME_KNOT * (self.st_on - self.qrs_on)


def _rounded_durations(params: BeatParams) -> list[int]:
    return [max(1, int(round(d))) for d in params.durations()]


def beat_schedule(params: BeatParams, duration_ms: int, seed: int) -> list[Beat]:
    """Beats that fit completely inside ``duration_ms``, first one after a TP run."""
    rng = np.random.default_rng([seed, 0])
    durs = _rounded_durations(params)
    active = sum(durs)
    shortest_rr = params.rr_ms * (1.0 - params.jitter_frac)
    if active >= shortest_rr:
        raise ParamError(
            f"segment durations ({active} ms) exceed the shortest RR interval ({shortest_rr:.1f} ms)")
    beats = []
    # The first TP run is a random share of a nominal TP so records start at
    # an arbitrary phase of diastole.
    t = int(round(rng.uniform(0.2, 1.0) * (params.rr_ms - active)))
    t = max(t, 1)
    while True:
        bounds = [t]
        for d in durs:
            bounds.append(bounds[-1] + d)
        if bounds[-1] > duration_ms:
            break
        beats.append(Beat(*bounds))
        rr = params.rr_ms * (1.0 + rng.uniform(-params.jitter_frac, params.jitter_frac))
        t += int(round(rr))
    return beats


def _bump(n: int) -> np.ndarray:
    u = (np.arange(n) + 0.5) / n
    edge = math.exp(-0.5 * (0.5 / BUMP_SD) ** 2)
    return (np.exp(-0.5 * ((u - 0.5) / BUMP_SD) ** 2) - edge) / (1.0 - edge)


def _qrs_shape(n: int, amp: LeadAmplitudes, rprime: float) -> np.ndarray:
    u = (np.arange(n) + 0.5) / n
    values = (0.0, amp.q, amp.r, amp.s, TERMINAL_FRACTION * amp.s + rprime, 0.0)
    return np.interp(u, QRS_KNOTS, values)


def render_beats(params: BeatParams, beats: list[Beat], n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free 12 x n waveform and the matching label array."""
    labels = np.full(n_samples, SegmentClass.TPSegment, dtype=np.int8)
    wave = np.zeros((len(LEADS), n_samples))
    for b in beats:
        labels[b.p_on:b.pr_on] = SegmentClass.PWave
        labels[b.pr_on:b.qrs_on] = SegmentClass.PRSegment
        labels[b.qrs_on:b.st_on] = SegmentClass.QRS
        labels[b.st_on:b.t_on] = SegmentClass.STSegment
        labels[b.t_on:b.t_off] = SegmentClass.TWave
        p_shape = _bump(b.pr_on - b.p_on)
        t_shape = _bump(b.t_off - b.t_on)
        for i, lead in enumerate(LEADS):
            amp = params.amplitudes[lead]
            rprime = params.rprime_v1_amp if lead is LeadId.V1 else 0.0
            wave[i, b.p_on:b.pr_on] += amp.p * p_shape
            wave[i, b.qrs_on:b.st_on] += _qrs_shape(b.st_on - b.qrs_on, amp, rprime)
            wave[i, b.t_on:b.t_off] += amp.t * t_shape
    return wave, labels


def generate_record(params: BeatParams, duration_ms: int, seed: int, *, record_id: str = "",
                    patient_id: str = "", acquired_date: dt.date | None = None
                    ) -> tuple[EcgRecord, LabelSequence]:
    """Deterministic 1 kHz record and its ground-truth labels."""
    duration_ms = int(duration_ms)
    if duration_ms < 1:
        raise ParamError("duration_ms must be positive")
    beats = beat_schedule(params, duration_ms, seed)
    wave, labels = render_beats(params, beats, duration_ms)
    if params.noise_sd > 0:
        rng = np.random.default_rng([seed, 1])
        wave = wave + rng.normal(0.0, params.noise_sd, size=wave.shape)
    record = EcgRecord.from_matrix(wave, record_id=record_id, patient_id=patient_id,
                                   acquired_date=acquired_date)
    return record, LabelSequence(labels, record_id, 0)


# -- random parameter draws ---------------------------------------------------

def random_params(rng: np.random.Generator, *, noise_sd: float = 0.02,
                  jitter_frac: float = 0.03) -> BeatParams:
    """A control (disease-free) beat drawn from the generator's population."""
    hr = rng.uniform(55.0, 90.0)
    p = rng.normal(100.0, 10.0)
    pr = rng.normal(70.0, 10.0)
    qrs = rng.normal(90.0, 8.0)
    st = rng.normal(100.0, 12.0)
    t = rng.normal(160.0, 18.0)
    durs = np.clip([p, pr, qrs, st, t], [70, 45, 70, 60, 110], [130, 100, 115, 140, 210])
    hr = min(hr, max_heart_rate(float(durs.sum()), jitter_frac))
    scale = np.exp(rng.normal(0.0, 0.15, size=(len(LEADS), 5)))
    amps = {}
    for i, lead in enumerate(LEADS):
        base = np.array(dataclasses.astuple(BASE_AMPLITUDES[lead]))
        amps[lead] = LeadAmplitudes(*(base * scale[i]).tolist())
    return BeatParams(float(hr), *map(float, durs), amplitudes=amps, rprime_v1_amp=0.0,
                      noise_sd=noise_sd, jitter_frac=jitter_frac)


def max_heart_rate(active_ms: float, jitter_frac: float) -> float:
    """Fastest rate that leaves room for a widened QRS and a TP run of 140 ms."""
    return 60000.0 * (1.0 - jitter_frac) / (active_ms + 40.0 + 140.0)


class DiseaseKind(str, enum.Enum):
    RightHeart = "RightHeart"
    Hypertrophy = "Hypertrophy"
    LowVoltage = "LowVoltage"


def _scale_amp(amp: LeadAmplitudes, **factors) -> LeadAmplitudes:
    return dataclasses.replace(amp, **{k: getattr(amp, k) * f for k, f in factors.items()})


def apply_disease(params: BeatParams, kind: DiseaseKind, severity: float) -> BeatParams:
    """Shift a control beat toward a disease signature; linear in severity."""
    s = float(severity)
    if not 0.0 <= s <= 1.0:
        raise ParamError("severity must lie in [0, 1]")
    if s == 0.0:
        return params
    kind = DiseaseKind(kind)
    amps = dict(params.amplitudes)
    if kind is DiseaseKind.RightHeart:
        # R' in V1 plus a rightward axis: smaller R and a deeper terminal S in lead I.
        I = amps[LeadId.I]
        amps[LeadId.I] = dataclasses.replace(I, r=I.r * (1.0 - 0.5 * s), s=I.s - 0.4 * s)
        for lead in (LeadId.III, LeadId.aVF):
            amps[lead] = _scale_amp(amps[lead], r=1.0 + 0.4 * s)
        return params.replace(amplitudes=amps, rprime_v1_amp=params.rprime_v1_amp + 0.8 * s)
    if kind is DiseaseKind.Hypertrophy:
        for lead in (LeadId.I, LeadId.aVL, LeadId.V4, LeadId.V5, LeadId.V6):
            amps[lead] = _scale_amp(amps[lead], r=1.0 + 0.8 * s)
        for lead in (LeadId.V1, LeadId.V2):
            amps[lead] = _scale_amp(amps[lead], s=1.0 + 0.8 * s)
        return params.replace(amplitudes=amps, qrs_ms=params.qrs_ms + 30.0 * s)
    for lead in LEADS:
        amps[lead] = _scale_amp(amps[lead], q=1.0 - 0.6 * s, r=1.0 - 0.6 * s, s=1.0 - 0.6 * s)
    return params.replace(amplitudes=amps)


def mass_index_analog(params: BeatParams, rng: np.random.Generator, noise_sd: float = 4.0) -> float:
    """LV-mass-like target: affine in QRS width and lateral R amplitude, plus noise."""
    return float(20.0 + 0.6 * params.qrs_ms + 25.0 * params.mean_r_amplitude()
                 + rng.normal(0.0, noise_sd))


# -- cohorts ---------------------------------------------------------------------

@dataclass(frozen=True)
class Demographics:
    age: int
    sex: str
    study_year: int

    @property
    def age_bin(self) -> int:
        return self.age // 10 * 10


@dataclass(frozen=True)
class CohortSpec:
    n_cases: int
    n_controls: int
    disease_kind: DiseaseKind = DiseaseKind.RightHeart
    severity_range: tuple[float, float] = (0.5, 1.0)
    age_range: tuple[int, int] = (20, 89)
    study_years: tuple[int, int] = (2010, 2017)
    max_controls_per_case: int = 5
    duration_ms: int = 10000
    noise_sd: float = 0.02
    jitter_frac: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.severity_range
        if self.n_cases < 0 or self.n_controls < 0:
            raise ParamError("cohort counts must be non-negative")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParamError("severity_range must satisfy 0 <= lo <= hi <= 1")
        object.__setattr__(self, "disease_kind", DiseaseKind(self.disease_kind))

    @classmethod
    def from_dict(cls, obj: dict) -> "CohortSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ParamError(f"unknown cohort spec field(s): {', '.join(sorted(unknown))}")
        kw = dict(obj)
        for key in ("severity_range", "age_range", "study_years"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disease_kind"] = self.disease_kind.value
        return d


@dataclass(frozen=True, eq=False)
class CohortMember:
    record: EcgRecord
    labels: LabelSequence
    case_flag: bool
    severity: float
    demographics: Demographics
    params: BeatParams
    matched_to: str | None = None


def _random_demographics(rng, spec: CohortSpec) -> Demographics:
    age = int(rng.integers(spec.age_range[0], spec.age_range[1] + 1))
    sex = "F" if rng.random() < 0.5 else "M"
    year = int(rng.integers(spec.study_years[0], spec.study_years[1] + 1))
    return Demographics(age, sex, year)


def _matched_demographics(rng, case: Demographics, spec: CohortSpec) -> Demographics:
    lo = max(case.age_bin, spec.age_range[0])
    hi = min(case.age_bin + 9, spec.age_range[1])
    return Demographics(int(rng.integers(lo, hi + 1)), case.sex, case.study_year)


def _date_in_year(rng, year: int) -> dt.date:
    return dt.date(year, 1, 1) + dt.timedelta(days=int(rng.integers(0, 365)))


def generate_cohort(spec: CohortSpec) -> list[CohortMember]:
    """Cases with severities from the spec range and demographically matched controls."""
    rng = np.random.default_rng([spec.seed, 7])
    plan = []
    for i in range(spec.n_cases):
        demo = _random_demographics(rng, spec)
        sev = float(rng.uniform(*spec.severity_range))
        plan.append((f"case{i:04d}", True, sev, demo, None))
    cases = [p for p in plan]
    unmatched = 0
    for j in range(spec.n_controls):
        if cases and j < spec.max_controls_per_case * len(cases):
            case = cases[j % len(cases)]
            demo = _matched_demographics(rng, case[3], spec)
            matched = case[0]
        else:
            demo = _random_demographics(rng, spec)
            matched = None
            unmatched += 1
        plan.append((f"ctrl{j:04d}", False, 0.0, demo, matched))
    if cases and unmatched:
        warnings.warn(f"{unmatched} control(s) could not be matched to a case", stacklevel=2)

    members = []
    for k, (rid, is_case, sev, demo, matched) in enumerate(plan):
        # Base parameters come from a stream that does not depend on case status.
        prng = np.random.default_rng([spec.seed, 11, k])
        base = random_params(prng, noise_sd=spec.noise_sd, jitter_frac=spec.jitter_frac)
        params = apply_disease(base, spec.disease_kind, sev) if is_case else base
        date = _date_in_year(prng, demo.study_year)
        record, labels = generate_record(params, spec.duration_ms, seed=spec.seed * 100003 + k,
                                         record_id=rid, patient_id=f"pt_{rid}", acquired_date=date)
        members.append(CohortMember(record, labels, is_case, sev, demo, params, matched))
    return members


def generate_tracking_cohort(n_patients: int, n_years: int = 5, ecgs_per_year: int = 3, *,
                             disease_kind=DiseaseKind.RightHeart, severity_range=(0.0, 1.0),
                             start_year: int = 2012, duration_ms: int = 10000,
                             noise_sd: float = 0.02, seed: int = 0) -> list[CohortMember]:
    """Patients whose severity ramps linearly from the low to the high end over the years."""
    lo, hi = severity_range
    members = []
    for p in range(n_patients):
        prng = np.random.default_rng([seed, 13, p])
        base = random_params(prng, noise_sd=noise_sd)
        demo = Demographics(int(prng.integers(30, 80)), "F" if prng.random() < 0.5 else "M",
                            start_year)
        for y in range(n_years):
            sev = lo + (hi - lo) * y / max(n_years - 1, 1)
            for e in range(ecgs_per_year):
                erng = np.random.default_rng([seed, 17, p, y, e])
                # Visit-level wobble in rate; morphology stays the patient's own.
                hr_cap = max_heart_rate(sum(base.durations()), base.jitter_frac)
                hr = float(np.clip(base.heart_rate_bpm + erng.normal(0, 3.0), 50.0, hr_cap))
                params = apply_disease(base.replace(heart_rate_bpm=hr), disease_kind, sev)
                rid = f"trk{p:03d}_{y}_{e}"
                date = _date_in_year(erng, start_year + y)
                record, labels = generate_record(
                    params, duration_ms, seed=int(erng.integers(2**31)), record_id=rid,
                    patient_id=f"trk{p:03d}", acquired_date=date)
                members.append(CohortMember(record, labels, sev > 0, sev, demo, params))
    return members
