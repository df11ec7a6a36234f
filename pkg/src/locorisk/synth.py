"""Seeded two-domain synthetic population with Gompertz morbidity and mortality.

A latent frailty ``f`` raises both hazards and lowers daily activity, so
minute step tracks carry information about the morbidity label. The target
domain mimics phone data: some days are too sparse to pass the quality
filter, amplitudes may be rescaled, and overnight plateaus of constant step
counts are injected.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .steps import RawAccelTrack
from .survival import sample_gompertz
from .tracks import MINUTES_PER_DAY

AGE_BIN_EDGES = tuple(range(45, 90, 5))
DOMAINS = ("source", "target")
_DOMAIN_CODE = {"source": 0, "target": 1}
_ID_PREFIX = {"source": "S", "target": "T"}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2000
    age_weights_source: tuple = (0.04, 0.08, 0.2, 0.26, 0.22, 0.12, 0.05, 0.03)
    age_weights_target: tuple = (0.14, 0.2, 0.22, 0.18, 0.12, 0.08, 0.04, 0.02)
    # morbidity: hazard exp(a_m + gamma_m * age + f)
    a_morbidity: float = -8.0
    gamma_morbidity: float = 0.059
    # mortality: hazard exp(a + gamma * age + frailty_mortality * f)
    a_mortality: float = -9.5
    gamma_mortality: float = 0.10
    frailty_mortality: float = 0.5
    followup_years: tuple = (4.0, 7.0)
    frailty_sd: float = 2.0
    smoking_prevalence: float = 0.2
    smoking_offset: float = 1.0
    # activity
    n_days: int = 14
    kappa: float = 0.35
    age_activity_slope: float = 0.15
    active_fraction: float = 0.3
    # share of the activity multiplier expressed through the fraction of active minutes
    fraction_exponent: float = 0.8
    cadence: float = 30.0
    day_noise_sd: float = 0.2
    # restless nights: active-minute probability night_active_fraction * exp(night_kappa_ratio * kappa * f)
    night_active_fraction: float = 0.01
    night_kappa_ratio: float = 1.5
    night_cadence: float = 4.0
    # target-domain shift
    target_sparsity: float = 0.2
    amplitude_scale: float = 0.3
    plateau_prob: float = 0.7
    plateau_hours: tuple = (5.0, 8.0)
    plateau_level: tuple = (3, 8)
    seed: int = 0

    def __post_init__(self):
        for name in ("age_weights_source", "age_weights_target", "followup_years", "plateau_hours",
                     "plateau_level"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.gamma_morbidity <= 0 or self.gamma_mortality <= 0:
            raise ValueError("gamma must be positive")
        for name in ("age_weights_source", "age_weights_target"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.size != len(AGE_BIN_EDGES) - 1 or np.any(w < 0) or w.sum() <= 0:
                raise ValueError(f"{name} needs {len(AGE_BIN_EDGES) - 1} non-negative weights")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1")
        for name in ("smoking_prevalence", "target_sparsity", "plateau_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.night_active_fraction < 0 or self.night_cadence < 0:
            raise ValueError("night activity parameters must be non-negative")
        if self.frailty_sd < 0 or self.day_noise_sd < 0:
            raise ValueError("standard deviations must be non-negative")
        lo, hi = self.followup_years
        if not 0 < lo <= hi:
            raise ValueError("followup_years must satisfy 0 < min <= max")
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def without_shift(self):
        return replace(self, target_sparsity=0.0, amplitude_scale=1.0, plateau_prob=0.0,
                       age_weights_target=self.age_weights_source)


@dataclass
class Subject:
    subject_id: str
    domain: str
    index: int
    age_years: float
    sex: int
    smoking: int
    frailty: float
    morbid: bool
    onset_age: float
    event_age: float
    event_observed: bool
    followup_years: float

    @property
    def exit_age(self):
        return self.event_age


def subject_rng(seed, domain, index, stream=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), _DOMAIN_CODE[domain], int(index), stream]))


def _draw_subject(config: SynthConfig, domain, index):
    rng = subject_rng(config.seed, domain, index)
    weights = np.asarray(config.age_weights_source if domain == "source" else config.age_weights_target)
    b = rng.choice(weights.size, p=weights / weights.sum())
    age = AGE_BIN_EDGES[b] + 5.0 * rng.random()
    sex = int(rng.random() < 0.5)
    smoking = int(rng.random() < config.smoking_prevalence)
    f = config.frailty_sd * rng.standard_normal() + config.smoking_offset * smoking
    onset = float(sample_gompertz(rng, config.a_morbidity + f, config.gamma_morbidity, 0.0, size=()))
    morbid = onset <= age
    log_rate = config.a_mortality + config.frailty_mortality * f
    death = float(sample_gompertz(rng, log_rate, config.gamma_mortality, age, size=()))
    lo, hi = config.followup_years
    follow = lo + (hi - lo) * rng.random()
    observed = death <= age + follow
    exit_age = death if observed else age + follow
    return Subject(f"{_ID_PREFIX[domain]}{index:05d}", domain, index, float(age), sex, smoking, float(f),
                   bool(morbid), onset, float(exit_age), bool(observed), float(exit_age - age))


def generate_population(config: SynthConfig, domains=DOMAINS):
    """Subjects for each domain; every draw comes from a per-subject stream."""
    return [_draw_subject(config, d, i) for d in domains for i in range(config.n_subjects)]


def _awake_weight():
    h = np.arange(MINUTES_PER_DAY) / 60.0
    return 1.0 / (1.0 + np.exp(-(h - 6.5) * 3)) * 1.0 / (1.0 + np.exp((h - 22.5) * 3))


def circadian_profile():
    """Relative activity per minute of the day (mean 1 over waking hours)."""
    h = np.arange(MINUTES_PER_DAY) / 60.0
    awake = _awake_weight()
    bumps = 1.0 + 0.6 * np.exp(-0.5 * ((h - 10.5) / 1.5) ** 2) + 0.5 * np.exp(-0.5 * ((h - 17.5) / 1.5) ** 2)
    prof = awake * bumps
    return prof / prof[awake > 0.5].mean()


_PROFILE = circadian_profile()
_NIGHT = 1.0 - _awake_weight()


def activity_multiplier(subject: Subject, config: SynthConfig):
    return math.exp(-config.kappa * subject.frailty
                    - config.age_activity_slope * (subject.age_years - 65.0) / 10.0)


def generate_tracks(subject: Subject, config: SynthConfig, rng=None):
    """Minute step counts ``(n_days, 1440)`` as int64 for one subject."""
    if rng is None:
        rng = subject_rng(config.seed, subject.domain, subject.index, stream=1)
    base = activity_multiplier(subject, config)
    q_night = np.clip(config.night_active_fraction * math.exp(config.night_kappa_ratio * config.kappa * subject.frailty)
                      * _NIGHT, 0.0, 0.5)
    days = np.zeros((config.n_days, MINUTES_PER_DAY), dtype=np.int64)
    target = subject.domain == "target"
    for d in range(config.n_days):
        a = base * math.exp(config.day_noise_sd * rng.standard_normal())
        q = np.clip(config.active_fraction * _PROFILE * a ** config.fraction_exponent, 0.0, 0.9)
        active = rng.random(MINUTES_PER_DAY) < q
        counts = 1 + rng.poisson(config.cadence * a * _PROFILE.clip(0.3, None))
        day = np.where(active, counts, 0)
        restless = (rng.random(MINUTES_PER_DAY) < q_night) & ~active
        day = np.where(restless, 1 + rng.poisson(config.night_cadence, MINUTES_PER_DAY), day)
        if target:
            if config.amplitude_scale != 1.0:
                # rescale counts but keep every active minute active
                day = np.where(day > 0, np.maximum(1, np.rint(day * config.amplitude_scale)), 0).astype(np.int64)
            sparse = rng.random() < config.target_sparsity
            plateau = rng.random() < config.plateau_prob
            if sparse:
                # phone left behind: a short burst of activity only
                keep = np.zeros(MINUTES_PER_DAY, dtype=bool)
                start = rng.integers(6 * 60, 20 * 60)
                keep[start:start + int(rng.integers(20, 90))] = True
                day = np.where(keep, day, 0)
            elif plateau:
                h0, h1 = config.plateau_hours
                length = int(60 * (h0 + (h1 - h0) * rng.random()))
                start = int(rng.integers(0, 3 * 60))
                level = int(rng.integers(config.plateau_level[0], config.plateau_level[1] + 1))
                day[start:start + length] = level
        days[d] = day
    return days


def raw_accel_from_minutes(subject_id, steps_per_minute, rng, rate_hz=100, bump_g=0.5, bump_ms=80,
                           noise_g=0.01):
    """Raw tri-axial samples whose step peaks reproduce ``steps_per_minute``.

    Steps are spread evenly within each minute with small jitter; every
    step is a raised-cosine bump well inside the detector's limits.
    """
    steps = np.asarray(steps_per_minute, dtype=np.int64)
    if np.any(steps > 200):
        raise ValueError("at most 200 steps per minute can be rendered")
    dt = int(round(1000 / rate_hz))
    t = np.arange(0, steps.size * 60_000, dt, dtype=np.int64)
    mag = np.ones(t.size)
    half = bump_ms // 2
    for k, s in enumerate(steps):
        if s == 0:
            continue
        spacing = 60_000 / s
        centers = k * 60_000 + spacing * (np.arange(s) + 0.5)
        jitter = max(0.0, min(50.0, (spacing - 300.0) / 2.0))
        centers = centers + rng.uniform(-jitter, jitter, s)
        for c in np.rint(centers).astype(np.int64):
            lo = np.searchsorted(t, c - half)
            hi = np.searchsorted(t, c + half, side="right")
            x = (t[lo:hi] - c) / half
            mag[lo:hi] = np.maximum(mag[lo:hi], 1.0 + bump_g * 0.5 * (1 + np.cos(np.pi * x)))
    mag += noise_g * rng.uniform(-1, 1, t.size)
    # random but fixed orientation per track
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    return RawAccelTrack(subject_id, t, mag[:, None] * v[None, :], nominal_rate_hz=rate_hz)


def write_subjects_csv(path, subjects):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "domain", "age_years", "sex", "smoking", "morbid", "event_age",
                    "event_observed", "followup_years", "frailty"])
        for s in subjects:
            w.writerow([s.subject_id, s.domain, repr(s.age_years), s.sex, s.smoking, int(s.morbid),
                        repr(s.event_age), int(s.event_observed), repr(s.followup_years), repr(s.frailty)])


def read_subjects_csv(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            sid = r["subject_id"]
            out.append(Subject(
                subject_id=sid, domain=r["domain"], index=int(sid[1:]), age_years=float(r["age_years"]),
                sex=int(r["sex"]), smoking=int(r["smoking"]), frailty=float(r["frailty"]),
                morbid=bool(int(r["morbid"])), onset_age=float("nan"), event_age=float(r["event_age"]),
                event_observed=bool(int(r["event_observed"])), followup_years=float(r["followup_years"])))
    return out


@dataclass
class Cohort:
    """Population plus minute tracks, keyed by subject id."""

    config: SynthConfig
    subjects: list
    tracks: dict = field(default_factory=dict, repr=False)


def generate_cohort(config: SynthConfig, domains=DOMAINS, with_tracks=True) -> Cohort:
    subjects = generate_population(config, domains)
    tracks = {s.subject_id: generate_tracks(s, config) for s in subjects} if with_tracks else {}
    return Cohort(config, subjects, tracks)
