"""Synthetic cohorts shared by the unit and acceptance tests."""
from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from locorisk.survival import SurvivalRecord


def incidence_cohort(prevalence, seed, n=20000, beta=3.5, high_risk_fraction=0.1, gamma=0.1, followup=3.0):
    """Fixed-window incidence cohort with a binary high-risk subgroup.

    Entry ages are uniform on [40, 70); the intercept is solved so the
    expected event fraction equals ``prevalence``.
    """
    rng = np.random.default_rng(seed)
    entry = rng.uniform(40, 70, n)
    x = (rng.random(n) < high_risk_fraction).astype(float)
    lp = beta * x
    g = (np.exp(gamma * followup) - 1) / gamma

    def excess(a):
        return np.mean(-np.expm1(-np.exp(a + gamma * entry + lp) * g)) - prevalence

    a = brentq(excess, -40, 10)
    e = rng.exponential(size=n)
    t = np.log(np.exp(gamma * entry) + gamma * e * np.exp(-(a + lp))) / gamma
    event = t < entry + followup
    exit_age = np.where(event, t, entry + followup)
    return [SurvivalRecord(f"r{i}", float(entry[i]), float(exit_age[i]), bool(event[i]), {"x": float(x[i])})
            for i in range(n)]


def offset_weekly_scores(seed, n_per_group=100, weeks=16, offset=0.3, week_sd=1.5, subject_sd=0.3):
    """Weekly scores for two groups separated by a persistent per-subject offset plus noisy weeks."""
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.array(["A", "B"]), n_per_group)
    level = rng.normal(0.0, subject_sd, 2 * n_per_group) + np.where(groups == "B", offset, 0.0)
    scores = [lv + rng.normal(0.0, week_sd, weeks) for lv in level]
    return scores, groups


PIPELINE_STAGES = ("synth", "preprocess", "train", "score", "cox", "stats")
TINY_PIPELINE_CONFIG = {
    "architecture": {"n_units": 1},
    "train": {"scale": 1, "batch_size_per_domain": 8, "epochs_phase1": 2, "phase1_lr_epochs": [1, 1, 0],
              "ramp_epochs": 2, "ramp_step_epochs": 1, "plateau_epochs": 1, "decay_epochs": 1,
              "final_epochs": 1, "best_window": 2, "eval_subsample": 40},
}


def run_pipeline(workspace, seed=3, n=120, config=None, stages=PIPELINE_STAGES):
    """Run the CLI stages in ``workspace``; returns the recorded output hashes per stage."""
    import json

    from locorisk.cli import main

    workspace.mkdir(parents=True, exist_ok=True)
    cfg_path = workspace / "config.json"
    cfg_path.write_text(json.dumps(config or TINY_PIPELINE_CONFIG))
    for stage in stages:
        argv = [stage, "--workspace", str(workspace), "--config", str(cfg_path), "--seed", str(seed)]
        if stage == "synth":
            argv += ["--n", str(n)]
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"stage {stage} exited with {code}")
    manifest = json.loads((workspace / "manifest.json").read_text())
    return {s: manifest["stages"][s]["outputs"] for s in stages}


def random_step_fixture(rng, max_minutes=10):
    """Raw magnitude track mixing step trains with edge-case spacings, heights and widths.

    Returns ``(t_ms, acc)`` with acc along x only; sample spacing is jittered.
    """
    minutes = rng.uniform(0.05, max_minutes) if rng.random() < 0.15 else rng.uniform(0.05, 1.0)
    duration = int(minutes * 60_000)
    dt = rng.choice([10, 20])
    t = np.cumsum(np.r_[0, rng.choice([dt, dt, dt, dt + 10], duration // dt - 1)])
    m = 1.0 + rng.choice([0.0, 0.005, 0.02]) * rng.uniform(-1, 1, t.size)
    pos = float(rng.uniform(0, 400))
    while pos < t[-1]:
        kind = rng.random()
        height = rng.choice([0.19, 0.2, 0.21, rng.uniform(0.1, 0.8)])
        if kind < 0.15:
            # plateau near the width limit
            width = rng.choice([480, 490, 500, 510, 520])
            m[(t >= pos) & (t <= pos + width)] += height
            pos += width + rng.uniform(100, 600)
        else:
            width = rng.choice([40, 60, 100])
            m[(t >= pos - width / 2) & (t < pos + width / 2)] += height
            pos += rng.choice([240.0, 250.0, 260.0, rng.uniform(150, 1200)])
    # quantise so ties and exact threshold comparisons occur
    m = np.round(m, 3)
    return t.astype(np.int64), np.c_[m, np.zeros(t.size), np.zeros(t.size)]


def slice_dataset(config, domains=("source", "target")):
    """Preprocessed week slices for a synthetic cohort.

    Returns ``(X, y, domain, groups, ages, subjects)``; target labels are -1.
    """
    from locorisk.synth import generate_population, generate_tracks
    from locorisk.tracks import days_from_minutes, preprocess_subject

    X, y, dom, grp, ages, kept = [], [], [], [], [], []
    for s in generate_population(config, domains):
        slices, _ = preprocess_subject(days_from_minutes(s.subject_id, generate_tracks(s, config)))
        if slices:
            kept.append(s)
        for sl in slices:
            X.append(sl.days)
            y.append(int(s.morbid) if s.domain == "source" else -1)
            dom.append(int(s.domain == "target"))
            grp.append(s.subject_id)
            ages.append(s.age_years)
    return (np.asarray(X), np.asarray(y), np.asarray(dom), np.asarray(grp), np.asarray(ages), kept)
