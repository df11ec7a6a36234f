"""Raw tri-axial acceleration to steps-per-minute.

A step is a peak of the acceleration magnitude that is

* prominent: at least ``min_prominence_g`` above the median magnitude of the
  surrounding 1 s window (samples within +-500 ms of the apex),
* narrow: its width at half prominence spans at most ``max_width_ms``,
* well separated: at least ``min_separation_ms`` after the previously
  accepted step (scan is in time order, so the earlier peak wins).

Peaks are local maxima of the magnitude; a flat top counts once, at its
first sample. Samples at either end of the track are never peaks.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

MINUTE_MS = 60_000
BASELINE_HALF_WINDOW_MS = 500
# magnitudes are rounded to 1 ng so rotations of the axes cannot create spurious ripples
MAGNITUDE_DECIMALS = 9


@dataclass
class RawAccelTrack:
    """Timestamped acceleration samples (g) for one subject.

    ``t_ms`` are integer milliseconds since track start. Monotonicity is
    checked by :func:`validate_raw_track`, not here.
    """

    subject_id: str
    t_ms: np.ndarray
    acc: np.ndarray
    nominal_rate_hz: float = 100.0
    integrity_errors: int = 0

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=np.int64).reshape(-1)
        self.acc = np.asarray(self.acc, dtype=np.float64).reshape(-1, 3)
        if self.acc.shape[0] != self.t_ms.shape[0]:
            raise ValueError("t_ms and acc must have the same number of samples")
        if not np.all(np.isfinite(self.acc)):
            raise ValueError("acceleration samples must be finite")
        if self.nominal_rate_hz <= 0:
            raise ValueError("nominal_rate_hz must be positive")
        if self.integrity_errors < 0:
            raise ValueError("integrity_errors must be non-negative")

    def __len__(self):
        return self.t_ms.shape[0]


@dataclass(frozen=True)
class StepParams:
    min_separation_ms: float = 250.0
    min_prominence_g: float = 0.2
    max_width_ms: float = 500.0

    def __post_init__(self):
        for name in ("min_separation_ms", "min_prominence_g", "max_width_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class TrackValidation:
    accepted: bool
    reasons: tuple = ()


@dataclass
class MinuteTrack:
    subject_id: str
    steps: np.ndarray
    partial: bool = False
    peaks_ms: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def total(self):
        return int(self.steps.sum())


def validate_raw_track(track: RawAccelTrack, max_errors=10, max_gap_ms=1000) -> TrackValidation:
    if len(track) == 0:
        return TrackValidation(False, ("empty",))
    reasons = []
    if track.integrity_errors > max_errors:
        reasons.append("too many integrity errors")
    dt = np.diff(track.t_ms)
    if np.any(dt <= 0):
        reasons.append("non-monotone timestamps")
    if np.any(dt > max_gap_ms):
        reasons.append("discontinuity")
    return TrackValidation(not reasons, tuple(reasons))


def magnitude_series(track: RawAccelTrack):
    """``(t_ms, |a|)`` with the Euclidean norm of the three axes."""
    mag = np.sqrt(np.einsum("ij,ij->i", track.acc, track.acc))
    return track.t_ms.copy(), mag


def _peak_candidates(m):
    """First index of each flat-topped local maximum (interior only)."""
    n = m.size
    if n < 3:
        return np.empty(0, dtype=np.int64)
    starts = np.concatenate([[0], np.flatnonzero(np.diff(m) != 0) + 1])
    vals = m[starts]
    is_peak = np.zeros(starts.size, dtype=bool)
    if starts.size >= 3:
        is_peak[1:-1] = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    return starts[is_peak]


def _window_medians(t, m, idx, half_ms, block=4096):
    lo = np.searchsorted(t, t[idx] - half_ms, side="left")
    hi = np.searchsorted(t, t[idx] + half_ms, side="right")
    out = np.empty(idx.size)
    width = int((hi - lo).max()) if idx.size else 0
    padded = np.concatenate([m, np.full(width, np.nan)])
    for s in range(0, idx.size, block):
        l, h = lo[s:s + block], hi[s:s + block]
        grid = padded[l[:, None] + np.arange(width)[None, :]]
        grid[np.arange(width)[None, :] >= (h - l)[:, None]] = np.nan
        out[s:s + block] = np.nanmedian(grid, axis=1)
    return out


def _half_width_ms(t, m, i, level, max_width_ms):
    left = i
    while left > 0 and m[left - 1] >= level:
        left -= 1
        if t[i] - t[left] > max_width_ms:
            break
    right = i
    while right < m.size - 1 and m[right + 1] >= level:
        right += 1
        if t[right] - t[left] > max_width_ms:
            break
    return t[right] - t[left]


def find_steps(t_ms, magnitude, params: StepParams | None = None):
    """Apex times (ms) of accepted step peaks in a magnitude series."""
    params = params or StepParams()
    t = np.asarray(t_ms, dtype=np.int64)
    m = np.round(np.asarray(magnitude, dtype=np.float64), MAGNITUDE_DECIMALS)
    cand = _peak_candidates(m)
    if cand.size == 0:
        return np.empty(0, dtype=np.int64)
    base = _window_medians(t, m, cand, BASELINE_HALF_WINDOW_MS)
    prom = np.round(m[cand] - base, MAGNITUDE_DECIMALS)
    keep = prom >= params.min_prominence_g
    cand, base, prom = cand[keep], base[keep], prom[keep]
    accepted = []
    last = None
    for i, b, p in zip(cand, base, prom):
        if last is not None and t[i] - last < params.min_separation_ms:
            continue
        level = round(b + p / 2.0, MAGNITUDE_DECIMALS)
        if _half_width_ms(t, m, i, level, params.max_width_ms) > params.max_width_ms:
            continue
        accepted.append(t[i])
        last = t[i]
    return np.asarray(accepted, dtype=np.int64)


def detect_steps(track: RawAccelTrack, params: StepParams | None = None) -> MinuteTrack:
    """Count steps per minute; minute k covers [60000k, 60000(k+1)) ms."""
    if len(track) == 0:
        raise ValueError("cannot count steps on an empty track")
    t, mag = magnitude_series(track)
    peaks = find_steps(t, mag, params)
    n_minutes = int(t[-1] // MINUTE_MS) + 1
    steps = np.bincount(peaks // MINUTE_MS, minlength=n_minutes).astype(np.int64)
    partial = bool(t[-1] - t[0] < MINUTE_MS)
    return MinuteTrack(track.subject_id, steps, partial, peaks)


class StepCounter(TransformerMixin, BaseEstimator):
    """Transformer from :class:`RawAccelTrack` objects to per-minute step arrays.

    Tracks that fail validation map to ``None`` and are listed in
    ``rejected_`` after :meth:`transform`.
    """

    def __init__(self, min_separation_ms=250.0, min_prominence_g=0.2, max_width_ms=500.0,
                 max_errors=10, max_gap_ms=1000):
        self.min_separation_ms = min_separation_ms
        self.min_prominence_g = min_prominence_g
        self.max_width_ms = max_width_ms
        self.max_errors = max_errors
        self.max_gap_ms = max_gap_ms

    def fit(self, X=None, y=None):
        self.params_ = StepParams(self.min_separation_ms, self.min_prominence_g, self.max_width_ms)
        return self

    def transform(self, X):
        params = StepParams(self.min_separation_ms, self.min_prominence_g, self.max_width_ms)
        out = []
        self.rejected_ = {}
        for track in X:
            check = validate_raw_track(track, self.max_errors, self.max_gap_ms)
            if not check.accepted:
                self.rejected_[track.subject_id] = check.reasons
                out.append(None)
            else:
                out.append(detect_steps(track, params).steps)
        return out


def read_raw_csv(path, subject_id=None, nominal_rate_hz=100.0, integrity_errors=0) -> RawAccelTrack:
    """Read ``t_ms,ax_g,ay_g,az_g``."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["t_ms", "ax_g", "ay_g", "az_g"]:
            raise ValueError(f"{path}: unexpected header {header}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.empty((0, 4))
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(str(path)))[0]
    return RawAccelTrack(subject_id, data[:, 0].astype(np.int64), data[:, 1:4],
                         nominal_rate_hz, integrity_errors)


def write_raw_csv(path, track: RawAccelTrack):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t_ms,ax_g,ay_g,az_g\n")
        for t, (x, y, z) in zip(track.t_ms, track.acc):
            fh.write(f"{int(t)},{float(x)!r},{float(y)!r},{float(z)!r}\n")


def write_minute_csv(path, tracks):
    """Write ``subject_id,minute_index,steps`` for an iterable of MinuteTrack."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "minute_index", "steps"])
        for tr in tracks:
            for k, s in enumerate(tr.steps):
                w.writerow([tr.subject_id, k, int(s)])


def read_minute_csv(path):
    """Return ``{subject_id: steps array}`` from a minute-track CSV."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["subject_id", "minute_index", "steps"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            rows.setdefault(r["subject_id"], []).append((int(r["minute_index"]), int(r["steps"])))
    out = {}
    for sid, pairs in rows.items():
        n = max(k for k, _ in pairs) + 1
        arr = np.zeros(n, dtype=np.int64)
        for k, s in pairs:
            arr[k] = s
        out[sid] = arr
    return out
