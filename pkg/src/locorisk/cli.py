"""Command-line pipeline: synth, steps, preprocess, train, score, cox, stats, report.

Every command works inside a workspace directory that carries a manifest of
stage outputs and their SHA-256 hashes. Upstream outputs are re-hashed before
use, so a modified intermediate stops the pipeline with exit code 2.

Exit codes: 0 success, 1 usage error, 2 data validation failure,
3 numerical failure. Failures print one line
``locorisk: error=<kind> command=<name> reason=<text>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import zipfile
import zlib
from contextlib import contextmanager

import numpy as np

from . import __version__
from .cohort import averaging_curve, compare_groups, detrend_risk, pearson_r, write_fig3_csv, write_table2_csv
from .model import ArchitectureConfig, load_checkpoint, save_checkpoint, sliding_average_risk, weekly_scores
from .steps import StepCounter, read_raw_csv, write_minute_csv, MinuteTrack, read_minute_csv, write_raw_csv
from .survival import (SurvivalFitError, fit_cox_gompertz_arrays, hazard_ratio, likelihood_ratio_test)
from .synth import SynthConfig, generate_population, generate_tracks, raw_accel_from_minutes, \
    read_subjects_csv, subject_rng, write_subjects_csv
from .tracks import (DayQualityParams, days_from_minutes, preprocess_subject, read_week_slices_csv,
                     write_quality_report, write_week_slices_csv)
from .trainer import DomainData, TrainConfig, TrainingDiverged, train, write_curves_csv

log = logging.getLogger("locorisk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "LOCORISK_LOG_LEVEL"
MANIFEST = "manifest.json"
STAGE_DEPS = {
    "synth": (),
    "steps": (),
    "preprocess": (),
    "train": ("preprocess", "synth"),
    "score": ("train", "preprocess"),
    "cox": ("score", "synth"),
    "stats": ("score", "synth", "cox"),
    "report": (),
}
COX_MODELS = {
    "basic": ("sex", "risk_score"),
    "advanced": ("sex", "log_sc", "risk_score"),
    "extended": ("sex", "log_sc", "smoking", "risk_score"),
}
HR_CONVENTION = "per 1 SD of the covariate in the fitted sample"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def derive_seed(seed, stage):
    """Stage sub-seed from the global seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_tracks_npz(path, arrays):
    """Deterministic npz: fixed zip timestamps, compressed members in key order."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_tracks_npz(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


class Workspace:
    def __init__(self, root):
        self.root = os.path.abspath(root)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def rel(self, path):
        return os.path.relpath(path, self.root).replace(os.sep, "/")

    def load_manifest(self):
        p = self.path(MANIFEST)
        if not os.path.exists(p):
            return {"tool_version": __version__, "stages": {}}
        try:
            with open(p, encoding="utf-8") as fh:
                return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from exc

    def save_manifest(self, manifest):
        manifest["tool_version"] = __version__
        _write_json(self.path(MANIFEST), manifest)

    def verify(self, manifest, stages):
        for stage in stages:
            entry = manifest["stages"].get(stage)
            if entry is None:
                raise DataError(f"required stage '{stage}' has not been run")
            for rel, digest in sorted(entry["outputs"].items()):
                p = self.path(rel)
                if not os.path.exists(p):
                    raise DataError(f"missing {rel} recorded by stage '{stage}'")
                if sha256_file(p) != digest:
                    raise DataError(f"hash mismatch for {rel} (stage '{stage}')")

    def record(self, manifest, stage, outputs, config, seed=None, inputs=None):
        stages = manifest["stages"]
        # rerunning a stage invalidates everything downstream of it
        stale = {stage}
        changed = True
        while changed:
            changed = False
            for s, deps in STAGE_DEPS.items():
                if s not in stale and any(d in stale for d in deps):
                    stale.add(s)
                    changed = True
        stale.add("report")
        for s in stale:
            stages.pop(s, None)
        stages[stage] = {
            "outputs": {self.rel(p): sha256_file(p) for p in sorted(outputs)},
            "config_hash": hashlib.sha256(_canonical(config).encode()).hexdigest(),
            "seed": seed,
            "inputs": inputs or {},
        }
        self.save_manifest(manifest)

    @contextmanager
    def lock(self):
        os.makedirs(self.root, exist_ok=True)
        p = self.path(".lock")
        try:
            fd = os.open(p, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = _read_pid(p)
            if pid is not None and _pid_alive(pid):
                raise DataError(f"workspace is locked by process {pid}") from None
            os.remove(p)
            fd = os.open(p, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            if os.path.exists(p):
                os.remove(p)


def _read_pid(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return int(fh.read().strip() or "0") or None
    except (OSError, ValueError):
        return None


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - {"synth", "preprocess", "train", "architecture", "stats"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _train_config(cfg, seed):
    section = dict(cfg.get("train", {}))
    scale = section.pop("scale", 10)
    section.setdefault("seed", derive_seed(seed, "train"))
    try:
        return TrainConfig.scaled(scale, **section) if scale and scale != 1 else TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _subjects(ws):
    return read_subjects_csv(ws.path("synth", "subjects.csv"))


# --- commands -----------------------------------------------------------------

def cmd_synth(args, ws, manifest, cfg):
    section = dict(cfg.get("synth", {}))
    if args.n is not None:
        section["n_subjects"] = args.n
    section["seed"] = derive_seed(args.seed, "synth")
    try:
        config = SynthConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    out = ws.path("synth")
    os.makedirs(out, exist_ok=True)
    subjects = generate_population(config)
    write_subjects_csv(os.path.join(out, "subjects.csv"), subjects)
    tracks = {s.subject_id: generate_tracks(s, config).astype(np.int16) for s in subjects}
    save_tracks_npz(os.path.join(out, "tracks.npz"), tracks)
    outputs = [os.path.join(out, "subjects.csv"), os.path.join(out, "tracks.npz")]
    if args.raw:
        raw_dir = os.path.join(out, "raw")
        os.makedirs(raw_dir, exist_ok=True)
        for s in subjects[:args.raw]:
            rng = subject_rng(config.seed, s.domain, s.index, stream=2)
            minutes = tracks[s.subject_id].reshape(-1)[9 * 60:9 * 60 + args.raw_minutes]
            p = os.path.join(raw_dir, f"{s.subject_id}.csv")
            write_raw_csv(p, raw_accel_from_minutes(s.subject_id, minutes, rng))
            outputs.append(p)
    _write_json(os.path.join(out, "config.json"), config.to_dict())
    outputs.append(os.path.join(out, "config.json"))
    ws.record(manifest, "synth", outputs, config.to_dict(), args.seed)
    return f"{len(subjects)} subjects"


def cmd_steps(args, ws, manifest, cfg):
    in_dir = args.input or ws.path("synth", "raw")
    if not os.path.isdir(in_dir):
        raise DataError(f"no raw accelerometer directory at {in_dir}")
    files = sorted(f for f in os.listdir(in_dir) if f.endswith(".csv"))
    if not files:
        raise DataError(f"no raw CSV files in {in_dir}")
    counter = StepCounter().fit()
    tracks, rejected = [], {}
    for f in files:
        try:
            raw = read_raw_csv(os.path.join(in_dir, f))
        except ValueError as exc:
            raise DataError(f"{f}: {exc}") from exc
        (steps,) = counter.transform([raw])
        if steps is None:
            rejected[raw.subject_id] = list(counter.rejected_[raw.subject_id])
        else:
            tracks.append(MinuteTrack(raw.subject_id, steps))
    out = ws.path("steps")
    os.makedirs(out, exist_ok=True)
    write_minute_csv(os.path.join(out, "minutes.csv"), tracks)
    _write_json(os.path.join(out, "rejected.json"), rejected)
    inputs = {f: sha256_file(os.path.join(in_dir, f)) for f in files}
    ws.record(manifest, "steps", [os.path.join(out, "minutes.csv"), os.path.join(out, "rejected.json")],
              {"params": counter.get_params()}, inputs=inputs)
    return f"{len(tracks)} tracks, {len(rejected)} rejected"


def cmd_preprocess(args, ws, manifest, cfg):
    section = dict(cfg.get("preprocess", {}))
    max_window = section.pop("max_window_days", 14)
    min_active = section.pop("min_active_minutes", 250)
    min_steps = section.pop("min_steps", 4)
    try:
        params = DayQualityParams(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid preprocess config: {exc}") from exc
    inputs = {}
    if args.minutes:
        if not os.path.exists(args.minutes):
            raise DataError(f"minute file {args.minutes} not found")
        try:
            series = read_minute_csv(args.minutes)
        except (ValueError, KeyError) as exc:
            raise DataError(str(exc)) from exc
        inputs[os.path.abspath(args.minutes)] = sha256_file(args.minutes)
        upstream = []
    else:
        ws.verify(manifest, ["synth"])
        tracks = load_tracks_npz(ws.path("synth", "tracks.npz"))
        series = {s.subject_id: tracks[s.subject_id].reshape(-1) for s in _subjects(ws)}
        upstream = ["synth"]
    slices, reports = [], {}
    for sid, minutes in series.items():
        days = days_from_minutes(sid, minutes)
        kept, rep = preprocess_subject(days, params, max_window, min_active, min_steps)
        slices.extend(kept)
        reports[sid] = rep
    out = ws.path("preprocess")
    os.makedirs(out, exist_ok=True)
    write_week_slices_csv(os.path.join(out, "week_slices.csv"), slices)
    summary = {
        "subjects": len(reports),
        "subjects_with_slices": sum(1 for r in reports.values() if r["slices"]),
        "slices": len(slices),
        "total_days": sum(r["total_days"] for r in reports.values()),
        "kept_days": sum(r["kept_days"] for r in reports.values()),
    }
    write_quality_report(os.path.join(out, "quality_report.json"), {"summary": summary, "subjects": reports})
    ws.record(manifest, "preprocess", [os.path.join(out, "week_slices.csv"), os.path.join(out, "quality_report.json")],
              {"filter": section, "max_window_days": max_window, "min_active_minutes": min_active,
               "min_steps": min_steps, "upstream": upstream}, inputs=inputs)
    return f"{len(slices)} week slices"


def _domain_data(slices, subjects_by_id, domain, rows_ids):
    ids = [sid for sid in rows_ids if subjects_by_id[sid].domain == domain]
    index = {sid: k for k, sid in enumerate(ids)}
    sel = [s for s in slices if s.subject_id in index]
    weeks = np.stack([s.days for s in sel]) if sel else np.empty((0, 7, 96))
    owner = np.array([index[s.subject_id] for s in sel], dtype=np.int64)
    labels = np.array([int(subjects_by_id[sid].morbid) if domain == "source" else -1 for sid in ids])
    ages = np.array([subjects_by_id[sid].age_years for sid in ids])
    return DomainData(weeks, owner, labels, ages, np.array(ids, dtype=object))


def cmd_train(args, ws, manifest, cfg):
    from .trainer import balance_age_distribution
    ws.verify(manifest, STAGE_DEPS["train"])
    config = _train_config(cfg, args.seed)
    if args.ablation:
        config = TrainConfig(**{**config.to_dict(), "ablation_lambda_zero": True})
    try:
        arch = ArchitectureConfig(**cfg.get("architecture", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid architecture config: {exc}") from exc
    subjects = {s.subject_id: s for s in _subjects(ws)}
    slices = read_week_slices_csv(ws.path("preprocess", "week_slices.csv"))
    unknown = {s.subject_id for s in slices} - set(subjects)
    if unknown:
        raise DataError(f"{len(unknown)} slice subjects missing from subjects.csv")
    with_slices = list(dict.fromkeys(s.subject_id for s in slices))
    src = _domain_data(slices, subjects, "source", with_slices)
    tgt = _domain_data(slices, subjects, "target", with_slices)
    rng = np.random.default_rng(derive_seed(args.seed, "split"))
    ks, kt = balance_age_distribution(src.ages, tgt.ages, rng)
    src, tgt = src.subset(ks), tgt.subset(kt)
    parts = []
    for data in (src, tgt):
        perm = rng.permutation(data.n_subjects)
        n_test = int(round(args.test_fraction * data.n_subjects))
        parts.append((data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))))
    (src_tr, src_te), (tgt_tr, tgt_te) = parts
    out = ws.path("train")
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for f in os.listdir(ckpt_dir):
        os.remove(os.path.join(ckpt_dir, f))
    try:
        result = train(config, src_tr, tgt_tr, src_te, tgt_te, arch, checkpoint_dir=ckpt_dir)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    except TrainingDiverged as exc:
        save_checkpoint(os.path.join(out, "last_good.ckpt"), exc.last_good, extra={"epoch": exc.epoch - 1})
        raise
    write_curves_csv(os.path.join(out, "curves.csv"), result.history)
    save_checkpoint(os.path.join(out, "best.ckpt"), result.best, extra={"epoch": result.best_epoch})
    split = {"best_epoch": result.best_epoch,
             "train": {"source": list(src_tr.subject_ids), "target": list(tgt_tr.subject_ids)},
             "test": {"source": list(src_te.subject_ids), "target": list(tgt_te.subject_ids)}}
    _write_json(os.path.join(out, "split.json"), split)
    outputs = [os.path.join(out, f) for f in ("curves.csv", "best.ckpt", "split.json")]
    outputs += [os.path.join(ckpt_dir, f) for f in sorted(os.listdir(ckpt_dir))]
    ws.record(manifest, "train", outputs, {"train": config.to_dict(), "architecture": arch.__dict__}, args.seed)
    last = result.history[-1]
    return (f"best epoch {result.best_epoch}; label acc test {last.label_acc_test:.3f}; "
            f"domain acc test {last.domain_acc_test:.3f}")


def cmd_score(args, ws, manifest, cfg):
    ws.verify(manifest, STAGE_DEPS["score"])
    params = load_checkpoint(ws.path("train", "best.ckpt"))
    slices = read_week_slices_csv(ws.path("preprocess", "week_slices.csv"))
    by_subject = {}
    for s in slices:
        by_subject.setdefault(s.subject_id, []).append(s)
    weeks = np.stack([s.days for s in slices]) if slices else np.empty((0, 7, 96))
    scores = weekly_scores(params, weeks) if len(weeks) else np.empty(0)
    out = ws.path("score")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "weekly_scores.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "slice_index", "weekly_score"])
        for s, v in zip(slices, scores):
            w.writerow([s.subject_id, s.slice_index, repr(float(v))])
    pos = 0
    with open(os.path.join(out, "scores.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "n_weeks", "risk_score", "log_mean_activity"])
        for sid, group in by_subject.items():
            k = len(group)
            sub = scores[pos:pos + k]
            pos += k
            mean_steps = float(np.mean([g.days.mean() for g in group]))
            log_sc = max(math.log(mean_steps), math.log(0.1)) if mean_steps > 0 else math.log(0.1)
            window = args.window or k
            w.writerow([sid, k, repr(float(sliding_average_risk(sub, window)[-1])), repr(log_sc)])
    outputs = [os.path.join(out, "weekly_scores.csv"), os.path.join(out, "scores.csv")]
    ws.record(manifest, "score", outputs, {"window": args.window})
    return f"{len(by_subject)} subjects scored"


def _read_scores(ws):
    out = {}
    with open(ws.path("score", "scores.csv"), newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out[r["subject_id"]] = (float(r["risk_score"]), float(r["log_mean_activity"]), int(r["n_weeks"]))
    return out


def _read_weekly(ws):
    out = {}
    with open(ws.path("score", "weekly_scores.csv"), newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["subject_id"], []).append(float(r["weekly_score"]))
    return {k: np.array(v) for k, v in out.items()}


def fit_table1(subjects, scores, models, domain="source"):
    rows = [s for s in subjects if s.subject_id in scores and s.domain == domain]
    if len(rows) < 10:
        raise DataError(f"only {len(rows)} scored {domain} subjects for the Cox fits")
    entry = np.array([s.age_years for s in rows])
    exit_ = np.array([s.event_age for s in rows])
    event = np.array([s.event_observed for s in rows])
    cov = {
        "sex": np.array([s.sex for s in rows], float),
        "smoking": np.array([s.smoking for s in rows], float),
        "risk_score": np.array([scores[s.subject_id][0] for s in rows]),
        "log_sc": np.array([scores[s.subject_id][1] for s in rows]),
    }
    report = {"endpoint": "mortality", "domain": domain, "hr_convention": HR_CONVENTION,
              "unavailable_covariates": {"bmi": "not simulated"}, "models": []}
    for name in models:
        names = COX_MODELS[name]
        full = fit_cox_gompertz_arrays(entry, exit_, event, np.column_stack([cov[c] for c in names]), names)
        nested_names = tuple(c for c in names if c != "risk_score")
        nested = fit_cox_gompertz_arrays(entry, exit_, event, np.column_stack([cov[c] for c in nested_names]),
                                         nested_names)
        stat, df, p = likelihood_ratio_test(nested, full)
        from scipy.stats import norm
        covs = {"age": {"beta": full.gamma, "se": full.gamma_se,
                        "hr": math.exp(full.gamma * float(np.std(entry))),
                        "p_value": float(2 * norm.sf(abs(full.gamma / full.gamma_se)))}}
        for c in names:
            b, se = full.coef[c], full.se[c]
            covs[c] = {"beta": b, "se": se, "hr": hazard_ratio(full, c),
                       "p_value": float(2 * norm.sf(abs(b / se))) if se > 0 else 1.0}
        report["models"].append({
            "name": name.capitalize(), "n": full.n, "events": full.events, "intercept": full.intercept,
            "gamma": full.gamma, "loglik": full.loglik, "covariates": covs,
            "lr_test": {"statistic": stat, "df": df, "p_value": p, "tested": "risk_score"},
        })
    return report


def cmd_cox(args, ws, manifest, cfg):
    ws.verify(manifest, STAGE_DEPS["cox"])
    models = list(COX_MODELS) if args.model == "all" else [args.model]
    report = fit_table1(_subjects(ws), _read_scores(ws), models)
    out = ws.path("cox")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "table1.json"), report)
    with open(os.path.join(out, "table1.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "covariate", "beta", "se", "hr", "p_value"])
        for m in report["models"]:
            for c, v in m["covariates"].items():
                w.writerow([m["name"], c] + [f"{v[k]:.6g}" for k in ("beta", "se", "hr", "p_value")])
    ws.record(manifest, "cox", [os.path.join(out, "table1.json"), os.path.join(out, "table1.csv")],
              {"models": models})
    return ", ".join(f"{m['name']}: LR p={m['lr_test']['p_value']:.3g}" for m in report["models"])


def cmd_stats(args, ws, manifest, cfg):
    ws.verify(manifest, STAGE_DEPS["stats"])
    subjects = [s for s in _subjects(ws)]
    scores = _read_scores(ws)
    weekly = _read_weekly(ws)
    with open(ws.path("cox", "table1.json"), encoding="utf-8") as fh:
        table1 = json.load(fh)
    basic = next((m for m in table1["models"] if m["name"] == "Basic"), table1["models"][0])
    beta_r, gamma = basic["covariates"]["risk_score"]["beta"], basic["gamma"]
    scored = [s for s in subjects if s.subject_id in scores]
    out = ws.path("stats")
    os.makedirs(out, exist_ok=True)
    comparisons = []
    for domain in ("source", "target"):
        grp = [s for s in scored if s.domain == domain]
        if len(grp) < 2:
            continue
        det = detrend_risk([s.age_years for s in grp], [s.sex for s in grp], [scores[s.subject_id][0] for s in grp])
        for name, attr in (("smoker_vs_never", "smoking"), ("morbid_vs_healthy", "morbid")):
            a = det[[bool(getattr(s, attr)) for s in grp]]
            b = det[[not getattr(s, attr) for s in grp]]
            if a.size and b.size:
                comparisons.append(compare_groups(f"{domain}:{name}", a, b, beta_r=beta_r, gamma=gamma))
    write_table2_csv(os.path.join(out, "table2.csv"), comparisons)
    # averaging curve on the target domain (phone analog), morbid vs healthy
    tgt = [s for s in scored if s.domain == "target" and s.subject_id in weekly]
    rows = []
    if tgt:
        lengths = np.array([weekly[s.subject_id].size for s in tgt])
        windows = [k for k in range(1, int(lengths.max()) + 1) if np.sum(lengths >= k) * 2 >= lengths.size]
        labels = ["morbid" if s.morbid else "healthy" for s in tgt]
        if len(set(labels)) == 2:
            rows = averaging_curve([weekly[s.subject_id] for s in tgt], labels, [s.age_years for s in tgt],
                                   [s.sex for s in tgt], windows, pairs=[("morbid", "healthy")])
    write_fig3_csv(os.path.join(out, "fig3.csv"), rows)
    with open(os.path.join(out, "fig1b.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["log_mean_activity", "risk_score", "age"])
        for s in scored:
            r, lsc, _ = scores[s.subject_id]
            w.writerow([repr(lsc), repr(r), repr(s.age_years)])
    summary = {"pearson_r_log_activity_vs_risk": pearson_r([scores[s.subject_id][1] for s in scored],
                                                           [scores[s.subject_id][0] for s in scored]),
               "n": len(scored), "beta_risk": beta_r, "gamma": gamma}
    _write_json(os.path.join(out, "summary.json"), summary)
    outputs = [os.path.join(out, f) for f in ("table2.csv", "fig3.csv", "fig1b.csv", "summary.json")]
    ws.record(manifest, "stats", outputs, {})
    return f"{len(comparisons)} comparisons; R={summary['pearson_r_log_activity_vs_risk']:.3f}"


def cmd_report(args, ws, manifest, cfg):
    present = sorted(manifest["stages"])
    if not present:
        raise DataError("nothing to report: no stage has been run")
    ws.verify(manifest, present)
    bundle = {"tool_version": __version__, "stages": {}}
    for stage in present:
        entry = manifest["stages"][stage]
        files = {}
        for rel in sorted(entry["outputs"]):
            if rel.endswith(".json"):
                with open(ws.path(rel), encoding="utf-8") as fh:
                    files[rel] = json.load(fh)
            elif rel.endswith(".csv") and os.path.getsize(ws.path(rel)) < 200_000:
                with open(ws.path(rel), newline="", encoding="utf-8") as fh:
                    files[rel] = list(csv.reader(fh))
        bundle["stages"][stage] = {"manifest": entry, "files": files}
    out = ws.path("report")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "report.json"), bundle)
    ws.record(manifest, "report", [os.path.join(out, "report.json")], {"stages": present})
    return f"bundled {len(present)} stages"


COMMANDS = {
    "synth": cmd_synth, "steps": cmd_steps, "preprocess": cmd_preprocess, "train": cmd_train,
    "score": cmd_score, "cox": cmd_cox, "stats": cmd_stats, "report": cmd_report,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--workspace", default=".", help="pipeline working directory (default: .)")
    common.add_argument("--config", help="JSON config with synth/preprocess/train/architecture sections")
    common.add_argument("--seed", type=int, default=0, help="global seed; stages use derived sub-seeds")
    parser = _Parser(prog="locorisk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic two-domain cohort")
    p.add_argument("--n", type=int, help="subjects per domain")
    p.add_argument("--raw", type=int, default=0, help="also write raw accelerometer CSVs for the first N subjects")
    p.add_argument("--raw-minutes", type=int, default=10, help="minutes of raw data per raw CSV")
    p = sub.add_parser("steps", parents=[common], help="count steps per minute in raw accelerometer CSVs")
    p.add_argument("--input", help="directory of raw CSVs (default: synth/raw in the workspace)")
    p = sub.add_parser("preprocess", parents=[common], help="filter days, cut week slices, bin")
    p.add_argument("--minutes", help="minute CSV to use instead of the synth tracks")
    p = sub.add_parser("train", parents=[common], help="train the domain-adversarial classifier")
    p.add_argument("--ablation", action="store_true", help="keep lambda at 0 for the whole run")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p = sub.add_parser("score", parents=[common], help="weekly and averaged risk scores")
    p.add_argument("--window", type=int, help="trailing window in weeks (default: all weeks)")
    p = sub.add_parser("cox", parents=[common], help="Cox-Gompertz models on mortality")
    p.add_argument("--model", choices=["basic", "advanced", "extended", "all"], default="all")
    sub.add_parser("stats", parents=[common], help="group comparisons, averaging curve, activity scatter")
    sub.add_parser("report", parents=[common], help="bundle all outputs with the manifest")
    return parser


def _fail(kind, command, reason, code):
    reason = " ".join(str(reason).split())
    print(f"locorisk: error={kind} command={command} reason={reason}", file=sys.stderr)
    return code


def main(argv=None):
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = load_config(args.config)
    except UsageError as exc:
        return _fail("usage", getattr(locals().get("args"), "command", None) or "-", exc, EXIT_USAGE)
    ws = Workspace(args.workspace)
    try:
        with ws.lock():
            manifest = ws.load_manifest()
            msg = COMMANDS[args.command](args, ws, manifest, cfg)
    except UsageError as exc:
        return _fail("usage", args.command, exc, EXIT_USAGE)
    except (DataError, ValueError, KeyError, OSError) as exc:
        return _fail("data", args.command, exc, EXIT_DATA)
    except (TrainingDiverged, SurvivalFitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", args.command, exc, EXIT_NUMERIC)
    print(f"{args.command}: {msg}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
