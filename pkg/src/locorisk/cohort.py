"""Morbidity labels, age/sex detrending, Mann-Whitney tests and healthspan rescaling."""
from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats
from scipy.stats import rankdata

EXACT_MAX_TOTAL = 16
_CODE_RE = re.compile(r"^([A-Z])(\d{2})(?:\.?[0-9A-Z]{0,4})$")
MENTAL_HEALTH_LETTER = "F"


def _parse_category(code):
    if not isinstance(code, str):
        raise ValueError(f"malformed ICD-10 code: {code!r}")
    m = _CODE_RE.match(code.strip().upper())
    if not m:
        raise ValueError(f"malformed ICD-10 code: {code!r}")
    return m.group(1), int(m.group(2))


@dataclass(frozen=True)
class ConditionCatalog:
    """Named ICD-10 category ranges, inclusive on both ends."""

    ranges: dict = field(default_factory=lambda: {
        "hypertension": (("I10", "I15"),),
        "arthritis": (("M00", "M25"),),
        "cancer": (("C00", "C99"),),
        "diabetes": (("E10", "E14"),),
        "chd": (("I20", "I25"),),
        "mi": (("I21", "I22"),),
        "angina": (("I20", "I20"),),
        "stroke": (("I60", "I64"),),
        "emphysema": (("J43", "J44"),),
        "chf": (("I50", "I50"),),
    })

    def __post_init__(self):
        for name, spans in self.ranges.items():
            for lo, hi in spans:
                (l1, n1), (l2, n2) = _parse_category(lo), _parse_category(hi)
                if l1 != l2 or n1 > n2:
                    raise ValueError(f"ill-formed range {lo}-{hi} for {name}")

    def conditions_for(self, code):
        letter, num = _parse_category(code)
        if letter == MENTAL_HEALTH_LETTER:
            return []
        hits = []
        for name, spans in self.ranges.items():
            for lo, hi in spans:
                (l1, n1), (_, n2) = _parse_category(lo), _parse_category(hi)
                if letter == l1 and n1 <= num <= n2:
                    hits.append(name)
                    break
        return hits


DEFAULT_CATALOG = ConditionCatalog()


def morbidity_label(icd10_codes, self_reports=None, catalog: ConditionCatalog | None = None) -> bool:
    """True if any code falls in a catalog range or any self-report flag is set.

    ``self_reports`` maps condition names to booleans (or is an iterable of
    condition names reported as present).
    """
    catalog = catalog or DEFAULT_CATALOG
    categories = [_parse_category(c) for c in icd10_codes]  # validate all first
    hit = any(catalog.conditions_for(f"{l}{n:02d}") for l, n in categories)
    if self_reports:
        flags = self_reports.items() if isinstance(self_reports, dict) else ((k, True) for k in self_reports)
        for name, on in flags:
            if name not in catalog.ranges:
                raise ValueError(f"unknown self-report condition {name!r}")
            hit = hit or bool(on)
    return bool(hit)


def age_bins(ages, bin_years=5):
    return np.floor(np.asarray(ages, dtype=np.float64) / bin_years).astype(np.int64)


def detrend_risk(ages, sexes, scores, bin_years=5):
    """Score minus the mean of the subject's (sex x age-bin) cohort."""
    ages = np.asarray(ages, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    sexes = np.asarray(sexes, dtype=object)
    if not (ages.shape == scores.shape == sexes.shape):
        raise ValueError("ages, sexes and scores must have equal length")
    if np.any(~np.isfinite(ages)) or any(s is None for s in sexes):
        raise ValueError("every subject needs an age and a sex")
    keys = list(zip(sexes.tolist(), age_bins(ages, bin_years).tolist()))
    out = np.empty_like(scores)
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for idx in groups.values():
        idx = np.asarray(idx)
        if idx.size == 1:
            out[idx] = 0.0
        else:
            out[idx] = scores[idx] - scores[idx].mean()
    return out


def _exact_distribution(doubled_ranks, n_a):
    """Counts of subsets of size n_a by doubled rank sum: {sum: count}."""
    # python ints keep the counts exact
    dp = [dict() for _ in range(n_a + 1)]
    dp[0][0] = 1
    for r in doubled_ranks:
        r = int(r)
        for k in range(n_a - 1, -1, -1):
            src = dp[k]
            if not src:
                continue
            dst = dp[k + 1]
            for s, c in src.items():
                dst[s + r] = dst.get(s + r, 0) + c
    return dp[n_a]


def mann_whitney_u(a, b, mode="auto"):
    """U statistic of ``a`` and a two-sided p-value.

    ``mode`` is "exact", "normal" or "auto" (exact when len(a)+len(b) <= 16).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    if mode not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown mode {mode!r}")
    na, nb = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    mu = na * nb / 2.0
    if np.all(pooled == pooled[0]):
        warnings.warn("all values are identical; p set to 1", RuntimeWarning, stacklevel=2)
        return u, 1.0
    if mode == "exact" or (mode == "auto" and na + nb <= EXACT_MAX_TOTAL):
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = _exact_distribution(doubled, na)
        offset = na * (na + 1)  # 2 * na(na+1)/2
        dev_obs = abs(2 * u - 2 * mu)
        hits = sum(c for s, c in dist.items() if abs((s - offset) - 2 * mu) >= dev_obs - 1e-9)
        return u, float(min(1.0, hits / math.comb(na + nb, na)))
    n = na + nb
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * stats.norm.sf(z)))


def pearson_r(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson_r needs two sequences of equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def healthspan_shift(group_a, group_b, fit=None, risk_covariate="risk_score", beta_r=None, gamma=None):
    """Risk difference between groups expressed as healthspan years.

    ``-beta_r * (mean_a - mean_b) / gamma``; ``beta_r`` and ``gamma`` come from
    ``fit`` unless given explicitly.
    """
    if fit is not None:
        beta_r = fit.coef[risk_covariate] if beta_r is None else beta_r
        gamma = fit.gamma if gamma is None else gamma
    if beta_r is None or gamma is None:
        raise ValueError("need a fit or explicit beta_r and gamma")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    diff = float(np.mean(group_a)) - float(np.mean(group_b))
    return -beta_r * diff / gamma


@dataclass
class GroupComparison:
    name: str
    n_a: int
    n_b: int
    mean_difference: float
    delta_hs_years: float
    u_statistic: float
    p_value: float


def compare_groups(name, group_a, group_b, fit=None, risk_covariate="risk_score", beta_r=None, gamma=None,
                   mode="auto") -> GroupComparison:
    group_a = np.asarray(group_a, dtype=np.float64)
    group_b = np.asarray(group_b, dtype=np.float64)
    u, p = mann_whitney_u(group_a, group_b, mode)
    dhs = healthspan_shift(group_a, group_b, fit, risk_covariate, beta_r, gamma)
    return GroupComparison(name, int(group_a.size), int(group_b.size),
                           float(group_a.mean() - group_b.mean()), float(dhs), u, p)


def averaging_curve(weekly_scores, groups, ages, sexes, windows, pairs=None, bin_years=5):
    """``(window, -log10 p, comparison)`` rows for growing averaging windows.

    Each subject's score for window ``k`` is the mean of its first ``k``
    weekly scores, detrended by age and sex. Subjects with fewer than ``k``
    weeks are left out of that window.
    """
    weekly = [np.asarray(w, dtype=np.float64) for w in weekly_scores]
    groups = np.asarray(groups, dtype=object)
    ages = np.asarray(ages, dtype=np.float64)
    sexes = np.asarray(sexes, dtype=object)
    labels = sorted(set(groups.tolist()), key=str)
    if len(labels) < 2:
        raise ValueError("averaging_curve needs at least two groups")
    pairs = list(pairs) if pairs is not None else list(combinations(labels, 2))
    lengths = np.array([w.size for w in weekly])
    rows = []
    for k in windows:
        k = int(k)
        if k < 1:
            raise ValueError("windows must be >= 1")
        ok = lengths >= k
        if ok.sum() * 2 < len(weekly):
            raise ValueError(f"window {k} exceeds the available weeks for more than half the subjects")
        means = np.array([w[:k].mean() if w.size >= k else np.nan for w in weekly])
        det = np.full(len(weekly), np.nan)
        det[ok] = detrend_risk(ages[ok], sexes[ok], means[ok], bin_years)
        for ga, gb in pairs:
            xa = det[ok & (groups == ga)]
            xb = det[ok & (groups == gb)]
            _, p = mann_whitney_u(xa, xb)
            rows.append((k, -math.log10(p), f"{ga}_vs_{gb}"))
    return rows


def write_table2_csv(path, comparisons):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "n_A", "n_B", "delta_hs_years", "p_value"])
        for c in comparisons:
            w.writerow([c.name, c.n_a, c.n_b, f"{c.delta_hs_years:.6g}", f"{c.p_value:.6g}"])


def write_fig3_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_weeks", "minus_log10_p", "comparison"])
        for k, v, name in rows:
            w.writerow([k, f"{v:.6g}", name])
