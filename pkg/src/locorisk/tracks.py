"""Day quality filters, 7-of-14 week slicing and 15-minute binning."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

MINUTES_PER_DAY = 1440
BIN_MINUTES = 15
N_BINS = MINUTES_PER_DAY // BIN_MINUTES
DAYS_PER_SLICE = 7
LOG_ACTIVITY_FLOOR = float(np.log(0.1))


@dataclass
class DayRecord:
    subject_id: str
    day_index: int
    minutes: np.ndarray
    missing: np.ndarray | None = None

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=np.float64)
        if self.minutes.shape != (MINUTES_PER_DAY,):
            raise ValueError(f"a day has {MINUTES_PER_DAY} minutes, got shape {self.minutes.shape}")
        if not np.all(np.isfinite(self.minutes)) or np.any(self.minutes < 0):
            raise ValueError("minute step counts must be finite and non-negative")
        if self.missing is not None:
            self.missing = np.asarray(self.missing, dtype=bool)
            if self.missing.shape != (MINUTES_PER_DAY,):
                raise ValueError("missing mask must have one entry per minute")
            self.minutes = np.where(self.missing, 0.0, self.minutes)


@dataclass(frozen=True)
class DayQualityParams:
    min_nonzero_minutes: int = 150
    min_significant_changes: int = 45
    min_distinct_values: int = 10
    change_threshold: float = 1.0

    def __post_init__(self):
        for name in ("min_nonzero_minutes", "min_significant_changes",
                     "min_distinct_values", "change_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DayQuality:
    good: bool
    reasons: tuple = ()


@dataclass
class WeekSlice:
    subject_id: str
    slice_index: int
    days: np.ndarray
    source_window_days: int
    day_indices: tuple = ()
    minutes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.float64)
        if self.days.shape != (DAYS_PER_SLICE, N_BINS):
            raise ValueError(f"WeekSlice days must be {DAYS_PER_SLICE}x{N_BINS}, got {self.days.shape}")
        if np.any(self.days < 0):
            raise ValueError("binned values must be non-negative")
        if not DAYS_PER_SLICE <= self.source_window_days <= 2 * DAYS_PER_SLICE:
            raise ValueError("source_window_days must lie in [7, 14]")


def filter_day(day: DayRecord, params: DayQualityParams | None = None) -> DayQuality:
    params = params or DayQualityParams()
    m = day.minutes
    reasons = []
    if np.count_nonzero(m) < params.min_nonzero_minutes:
        reasons.append("nonzero minutes")
    if np.count_nonzero(np.abs(np.diff(m)) > params.change_threshold) < params.min_significant_changes:
        reasons.append("significant changes")
    if np.unique(m).size < params.min_distinct_values:
        reasons.append("distinct values")
    return DayQuality(not reasons, tuple(reasons))


def bin_day(minutes) -> np.ndarray:
    """Mean of each 15-minute block: 1440 minutes -> 96 bins."""
    m = np.asarray(minutes.minutes if isinstance(minutes, DayRecord) else minutes, dtype=np.float64)
    if m.shape[-1] != MINUTES_PER_DAY:
        raise ValueError(f"expected {MINUTES_PER_DAY} minutes in the last axis, got {m.shape}")
    return m.reshape(*m.shape[:-1], N_BINS, BIN_MINUTES).mean(axis=-1)


def extract_week_slices(days, params: DayQualityParams | None = None, max_window_days=14,
                        quality=None):
    """Greedy non-overlapping slices of 7 good days from <=14-day windows.

    ``days`` must be sorted by ``day_index``. ``quality`` optionally supplies
    precomputed :class:`DayQuality` results aligned with ``days``.
    """
    params = params or DayQualityParams()
    days = list(days)
    idx = [d.day_index for d in days]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("days must be sorted by strictly increasing day_index")
    if quality is None:
        quality = [filter_day(d, params) for d in days]
    good = [d for d, q in zip(days, quality) if q.good]
    slices = []
    i = 0
    while i + DAYS_PER_SLICE <= len(good):
        chunk = good[i:i + DAYS_PER_SLICE]
        span = chunk[-1].day_index - chunk[0].day_index + 1
        if span <= max_window_days:
            minutes = np.stack([d.minutes for d in chunk])
            slices.append(WeekSlice(
                subject_id=chunk[0].subject_id,
                slice_index=len(slices),
                days=bin_day(minutes),
                source_window_days=span,
                day_indices=tuple(d.day_index for d in chunk),
                minutes=minutes,
            ))
            i += DAYS_PER_SLICE
        else:
            i += 1
    return slices


def low_activity_screen(minutes, min_active_minutes=250, min_steps=4) -> bool:
    """True (pass) unless fewer than ``min_active_minutes`` minutes reach ``min_steps``."""
    if isinstance(minutes, WeekSlice):
        if minutes.minutes is None:
            raise ValueError("low_activity_screen needs minute-resolution data")
        minutes = minutes.minutes
    elif isinstance(minutes, DayRecord):
        minutes = minutes.minutes
    elif isinstance(minutes, (list, tuple)) and minutes and isinstance(minutes[0], DayRecord):
        minutes = np.stack([d.minutes for d in minutes])
    m = np.asarray(minutes, dtype=np.float64)
    return int(np.count_nonzero(m >= min_steps)) >= min_active_minutes


def mean_log_activity(slices, floor=LOG_ACTIVITY_FLOOR) -> float:
    """Natural log of the mean steps/min over a subject's accepted minutes.

    Binning preserves the mean, so binned slices give the same value as the
    underlying minutes.
    """
    arrays = []
    for s in slices:
        if isinstance(s, WeekSlice):
            arrays.append(s.minutes if s.minutes is not None else s.days)
        else:
            arrays.append(np.asarray(s, dtype=np.float64))
    if not arrays or sum(a.size for a in arrays) == 0:
        raise ValueError("no data")
    total = sum(float(a.sum()) for a in arrays)
    count = sum(a.size for a in arrays)
    mean = total / count
    if mean <= 0:
        return float(floor)
    return float(max(np.log(mean), floor))


def days_from_minutes(subject_id, minutes, first_day_index=0):
    """Split a zero-filled minute series into DayRecords (trailing partial day dropped)."""
    m = np.asarray(minutes, dtype=np.float64).reshape(-1)
    n_days = m.size // MINUTES_PER_DAY
    return [DayRecord(subject_id, first_day_index + k, m[k * MINUTES_PER_DAY:(k + 1) * MINUTES_PER_DAY])
            for k in range(n_days)]


def preprocess_subject(days, params: DayQualityParams | None = None, max_window_days=14,
                       min_active_minutes=250, min_steps=4):
    """Filter, slice and screen one subject's days.

    Returns ``(slices, report)`` where ``report`` counts total/kept/dropped
    days with reasons and the number of slices removed by the low-activity
    screen.
    """
    params = params or DayQualityParams()
    days = list(days)
    quality = [filter_day(d, params) for d in days]
    reasons = {}
    for q in quality:
        for r in q.reasons:
            reasons[r] = reasons.get(r, 0) + 1
    slices = extract_week_slices(days, params, max_window_days, quality=quality)
    kept = [s for s in slices if low_activity_screen(s, min_active_minutes, min_steps)]
    for k, s in enumerate(kept):
        s.slice_index = k
    n_good = sum(q.good for q in quality)
    report = {
        "total_days": len(days),
        "kept_days": n_good,
        "dropped_days": len(days) - n_good,
        "drop_reasons": dict(sorted(reasons.items())),
        "slices": len(kept),
        "slices_failing_low_activity": len(slices) - len(kept),
    }
    return kept, report


class WeekSliceTransformer(TransformerMixin, BaseEstimator):
    """Turn per-subject day lists into stacked ``(n_slices, 7, 96)`` arrays.

    ``transform`` returns the stacked array; ``groups_`` holds the subject id
    of every row and ``report_`` the per-subject quality report.
    """

    def __init__(self, min_nonzero_minutes=150, min_significant_changes=45, min_distinct_values=10,
                 change_threshold=1.0, max_window_days=14, min_active_minutes=250, min_steps=4):
        self.min_nonzero_minutes = min_nonzero_minutes
        self.min_significant_changes = min_significant_changes
        self.min_distinct_values = min_distinct_values
        self.change_threshold = change_threshold
        self.max_window_days = max_window_days
        self.min_active_minutes = min_active_minutes
        self.min_steps = min_steps

    def _params(self):
        return DayQualityParams(self.min_nonzero_minutes, self.min_significant_changes,
                                self.min_distinct_values, self.change_threshold)

    def fit(self, X=None, y=None):
        self._params()
        return self

    def transform(self, X):
        params = self._params()
        rows, groups = [], []
        self.report_ = {}
        for days in X:
            days = list(days)
            if not days:
                continue
            sid = days[0].subject_id
            slices, rep = preprocess_subject(days, params, self.max_window_days,
                                             self.min_active_minutes, self.min_steps)
            self.report_[sid] = rep
            for s in slices:
                rows.append(s.days)
                groups.append(sid)
        self.groups_ = np.asarray(groups, dtype=object)
        if not rows:
            return np.empty((0, DAYS_PER_SLICE, N_BINS))
        return np.stack(rows)


def write_week_slices_csv(path, slices):
    """``subject_id,slice_index,day_in_slice,b0,...,b95``; one row per day."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "slice_index", "day_in_slice"] + [f"b{k}" for k in range(N_BINS)])
        for s in slices:
            for d in range(DAYS_PER_SLICE):
                w.writerow([s.subject_id, s.slice_index, d] + [repr(float(v)) for v in s.days[d]])


def read_week_slices_csv(path):
    """Return WeekSlices in file order (``source_window_days`` is not stored; set to 7)."""
    grouped = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["subject_id", "slice_index", "day_in_slice"] + [f"b{k}" for k in range(N_BINS)]
        if header != expected:
            raise ValueError(f"{path}: unexpected week-slice header")
        for row in reader:
            key = (row[0], int(row[1]))
            if key not in grouped:
                grouped[key] = np.zeros((DAYS_PER_SLICE, N_BINS))
                order.append(key)
            grouped[key][int(row[2])] = [float(v) for v in row[3:]]
    return [WeekSlice(sid, k, grouped[(sid, k)], DAYS_PER_SLICE) for sid, k in order]


def write_quality_report(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(reports, fh, indent=1, sort_keys=True)
        fh.write("\n")
