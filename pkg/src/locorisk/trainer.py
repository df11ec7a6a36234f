"""Two-domain adversarial training: schedules, age balancing, batches and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import check_binary, check_consistent_length, check_weeks
from .autodiff import NonFiniteGradientError
from .model import (ArchitectureConfig, ModelParams, as_graph_leaves, forward, init_params, log_odds,
                    save_checkpoint)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "lr", "lambda", "label_acc_train", "label_acc_test", "domain_acc_train",
                 "domain_acc_test", "label_loss", "domain_loss"]


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the last finished epoch's parameters."""

    def __init__(self, msg, epoch, last_good):
        super().__init__(msg)
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    batch_size_per_domain: int = 64
    epochs_phase1: int = 100
    phase1_lr_epochs: tuple = (20, 40, 40)
    phase1_lrs: tuple = (5e-3, 2e-3, 1e-3)
    ramp_epochs: int = 300
    ramp_step_epochs: int = 20
    ramp_lr: float = 1e-3
    plateau_epochs: int = 50
    plateau_lr: float = 1e-3
    decay_epochs: int = 50
    decay_lr: float = 3e-4
    final_epochs: int = 100
    final_lr: float = 1e-5
    lambda_max: float = 0.1
    best_window: int = 25
    eval_subsample: int = 2000
    seed: int = 0
    ablation_lambda_zero: bool = False
    p_drop: float = 0.0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "phase1_lr_epochs", tuple(int(e) for e in self.phase1_lr_epochs))
        object.__setattr__(self, "phase1_lrs", tuple(float(v) for v in self.phase1_lrs))
        for name in ("batch_size_per_domain", "epochs_phase1", "ramp_epochs", "ramp_step_epochs",
                     "plateau_epochs", "decay_epochs", "final_epochs", "best_window", "eval_subsample"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ramp_epochs % self.ramp_step_epochs:
            raise ValueError("ramp_epochs must be a multiple of ramp_step_epochs")
        if sum(self.phase1_lr_epochs) != self.epochs_phase1 or len(self.phase1_lrs) != len(self.phase1_lr_epochs):
            raise ValueError("phase1_lr_epochs must partition epochs_phase1, one lr each")
        if self.best_window > self.total_epochs:
            raise ValueError("best_window exceeds the number of epochs")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def total_epochs(self):
        return (self.epochs_phase1 + self.ramp_epochs + self.plateau_epochs + self.decay_epochs
                + self.final_epochs)

    @property
    def ramp_steps(self):
        return self.ramp_epochs // self.ramp_step_epochs

    @classmethod
    def scaled(cls, factor=10, **overrides):
        """Every phase shortened by ``factor``; the ramp keeps its number of steps."""
        base = cls()
        kw = dict(
            epochs_phase1=base.epochs_phase1 // factor,
            phase1_lr_epochs=tuple(max(1, e // factor) for e in base.phase1_lr_epochs),
            ramp_epochs=base.ramp_epochs // factor,
            ramp_step_epochs=max(1, base.ramp_step_epochs // factor),
            plateau_epochs=base.plateau_epochs // factor,
            decay_epochs=base.decay_epochs // factor,
            final_epochs=base.final_epochs // factor,
            best_window=math.ceil(base.best_window / factor),
        )
        kw["epochs_phase1"] = sum(kw["phase1_lr_epochs"])
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def lambda_schedule(epoch, config: TrainConfig | None = None):
    """Adversarial weight: 0, then a 15-step logistic ramp, then ``lambda_max``."""
    config = config or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.ablation_lambda_zero or epoch < config.epochs_phase1:
        return 0.0
    if epoch >= config.epochs_phase1 + config.ramp_epochs:
        return config.lambda_max
    n = (epoch - config.epochs_phase1) // config.ramp_step_epochs
    rho = -5.0 + 9.0 / 14.0 * n
    return config.lambda_max / (1.0 + math.exp(-rho))


def lr_schedule(epoch, config: TrainConfig | None = None):
    config = config or TrainConfig()
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    edge = 0
    for length, lr in zip(config.phase1_lr_epochs, config.phase1_lrs):
        edge += length
        if epoch < edge:
            return lr
    for length, lr in ((config.ramp_epochs, config.ramp_lr), (config.plateau_epochs, config.plateau_lr),
                       (config.decay_epochs, config.decay_lr), (config.final_epochs, config.final_lr)):
        edge += length
        if epoch < edge:
            return lr
    raise AssertionError("unreachable")


def balance_age_distribution(source_ages, target_ages, rng=None, bin_years=5, age_range=(45, 85)):
    """Indices of kept source and target subjects with equal per-bin counts.

    Subjects outside ``age_range`` are dropped from both domains; within each
    bin the larger side is subsampled uniformly to the smaller count.
    """
    rng = np.random.default_rng(rng)
    sa = np.asarray(source_ages, dtype=np.float64)
    ta = np.asarray(target_ages, dtype=np.float64)
    lo, hi = age_range
    edges = np.arange(lo, hi + bin_years, bin_years)
    keep_s, keep_t = [], []
    for b0, b1 in zip(edges[:-1], edges[1:]):
        si = np.flatnonzero((sa >= b0) & (sa < b1))
        ti = np.flatnonzero((ta >= b0) & (ta < b1))
        k = min(si.size, ti.size)
        if si.size > k:
            si = np.sort(rng.choice(si, k, replace=False))
        if ti.size > k:
            ti = np.sort(rng.choice(ti, k, replace=False))
        keep_s.append(si)
        keep_t.append(ti)
    keep_s = np.sort(np.concatenate(keep_s)).astype(np.int64)
    keep_t = np.sort(np.concatenate(keep_t)).astype(np.int64)
    if keep_s.size == 0 and keep_t.size == 0:
        raise ValueError("no subjects left in either domain after age balancing")
    return keep_s, keep_t


def make_batches(n_source, n_target, batch_size_per_domain, rng):
    """Shuffled ``(source_idx, target_idx)`` pairs of length b; partial batches dropped."""
    b = int(batch_size_per_domain)
    if n_source < b or n_target < b:
        raise ValueError(f"need at least {b} subjects per domain for one batch "
                         f"(have {n_source} source, {n_target} target)")
    ps = rng.permutation(n_source)
    pt = rng.permutation(n_target)
    n_batches = min(n_source, n_target) // b
    return [(ps[k * b:(k + 1) * b], pt[k * b:(k + 1) * b]) for k in range(n_batches)]


@dataclass
class DomainData:
    """Week slices grouped by subject.

    ``weeks`` is ``(n_slices, 7, 96)``; ``owner[i]`` is the subject index of
    slice ``i``; ``labels`` is per subject (-1 when unknown).
    """

    weeks: np.ndarray
    owner: np.ndarray
    labels: np.ndarray
    ages: np.ndarray | None = None
    subject_ids: np.ndarray | None = None
    _slices_of: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.weeks = np.asarray(self.weeks, dtype=np.float64)
        self.owner = np.asarray(self.owner, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.weeks.ndim != 3:
            raise ValueError("weeks must be (n_slices, n_days, n_bins)")
        if self.owner.shape != (self.weeks.shape[0],):
            raise ValueError("owner must have one entry per slice")
        n = self.labels.size
        if self.owner.size and (self.owner.min() < 0 or self.owner.max() >= n):
            raise ValueError("owner index out of range")
        self._slices_of = [[] for _ in range(n)]
        for i, o in enumerate(self.owner):
            self._slices_of[o].append(i)
        if any(not s for s in self._slices_of):
            raise ValueError("every subject needs at least one slice")
        self._slices_of = [np.asarray(s) for s in self._slices_of]

    @property
    def n_subjects(self):
        return self.labels.size

    def subset(self, subjects):
        subjects = np.asarray(subjects, dtype=np.int64)
        rows = np.concatenate([self._slices_of[s] for s in subjects]) if subjects.size else np.empty(0, int)
        remap = np.full(self.n_subjects, -1)
        remap[subjects] = np.arange(subjects.size)
        return DomainData(self.weeks[rows], remap[self.owner[rows]], self.labels[subjects],
                          None if self.ages is None else np.asarray(self.ages)[subjects],
                          None if self.subject_ids is None else np.asarray(self.subject_ids)[subjects])

    def pick(self, subjects, rng):
        """One random slice per listed subject."""
        rows = np.array([s[rng.integers(s.size)] for s in (self._slices_of[i] for i in subjects)], dtype=np.int64)
        return self.weeks[rows]

    def first_slices(self, subjects):
        return self.weeks[[self._slices_of[i][0] for i in subjects]]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    lam: float
    label_acc_train: float
    label_acc_test: float
    domain_acc_train: float
    domain_acc_test: float
    label_loss: float
    domain_loss: float

    def row(self):
        return [self.epoch, self.lr, self.lam, self.label_acc_train, self.label_acc_test,
                self.domain_acc_train, self.domain_acc_test, self.label_loss, self.domain_loss]


@dataclass
class TrainResult:
    history: list
    checkpoints: dict
    best: ModelParams
    best_epoch: int
    final: ModelParams


def write_curves_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in history:
            w.writerow([r.epoch] + [repr(float(v)) for v in r.row()[1:]])


def select_best(history, checkpoints, window=25):
    """Checkpoint with the best training label accuracy in the final window (ties: latest)."""
    if len(history) < window:
        raise ValueError(f"need at least {window} epoch records")
    tail = history[-window:]
    best = max(tail, key=lambda r: (r.label_acc_train, r.epoch))
    if best.epoch not in checkpoints:
        raise KeyError(f"no checkpoint stored for epoch {best.epoch}")
    return checkpoints[best.epoch], best.epoch


def _eval_logits(params, weeks, batch=256):
    lab, dom = [], []
    for s in range(0, len(weeks), batch):
        l, d = forward(weeks[s:s + batch], params)
        lab.append(l.data)
        dom.append(d.data)
    if not lab:
        return np.empty((0, 2)), np.empty((0, 2))
    return np.concatenate(lab), np.concatenate(dom)


class _EvalSet:
    """Fixed subsample (one fixed slice per subject) used for per-epoch metrics."""

    def __init__(self, source: DomainData | None, target: DomainData | None, n, rng):
        self.parts = []
        for dom, data in ((0, source), (1, target)):
            if data is None or data.n_subjects == 0:
                continue
            k = min(n, data.n_subjects)
            idx = np.sort(rng.choice(data.n_subjects, k, replace=False))
            self.parts.append((dom, data.first_slices(idx), data.labels[idx]))

    def metrics(self, params):
        label_hits, label_n, dom_acc = 0, 0, []
        for dom, weeks, labels in self.parts:
            lab, dl = _eval_logits(params, weeks)
            if dom == 0:
                ok = labels >= 0
                label_hits += int(np.sum(lab[ok].argmax(1) == labels[ok]))
                label_n += int(ok.sum())
            dom_acc.append(float(np.mean(dl.argmax(1) == dom)))
        # balanced over domains so a constant domain guess scores exactly 0.5
        return (label_hits / label_n if label_n else float("nan"),
                float(np.mean(dom_acc)) if dom_acc else float("nan"))


def _drop_days(weeks, p, rng):
    if p <= 0:
        return weeks
    mask = rng.random(weeks.shape[:2]) < p
    return np.where(mask[..., None], 0.0, weeks)


def train(config: TrainConfig, source: DomainData, target: DomainData, source_test: DomainData | None = None,
          target_test: DomainData | None = None, architecture: ArchitectureConfig | None = None,
          params: ModelParams | None = None, checkpoint_dir=None, progress=None) -> TrainResult:
    """Run the full schedule; returns history, final-window checkpoints and the selected model."""
    architecture = architecture or (params.config if params is not None else ArchitectureConfig())
    if np.any(source.labels < 0):
        raise ValueError("every source subject needs a label")
    ss = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, drop_ss, eval_ss, aug_ss = ss.spawn(5)
    dtype = np.dtype(config.dtype)
    if params is None:
        params = init_params(architecture, np.random.default_rng(init_ss))
    work = params.astype(dtype)
    batch_rng = np.random.default_rng(batch_ss)
    drop_rng = np.random.default_rng(drop_ss)
    aug_rng = np.random.default_rng(aug_ss)
    eval_rng = np.random.default_rng(eval_ss)
    train_eval = _EvalSet(source, target, config.eval_subsample, eval_rng)
    test_eval = _EvalSet(source_test, target_test, config.eval_subsample, eval_rng) \
        if source_test is not None or target_test is not None else None
    b = config.batch_size_per_domain
    opt = ad.Adam()
    history, checkpoints = [], {}
    last_good = params.copy()
    first_ckpt = config.total_epochs - config.best_window
    domain_labels = np.concatenate([np.zeros(b, np.int64), np.ones(b, np.int64)])
    label_mask = np.concatenate([np.ones(b), np.zeros(b)])
    for epoch in range(config.total_epochs):
        lr = lr_schedule(epoch, config)
        lam = lambda_schedule(epoch, config)
        batches = make_batches(source.n_subjects, target.n_subjects, b, batch_rng)
        l_sum = d_sum = 0.0
        for si, ti in batches:
            xs = _drop_days(source.pick(si, batch_rng), config.p_drop, aug_rng)
            weeks = np.concatenate([xs, target.pick(ti, batch_rng)]).astype(dtype)
            labels = np.concatenate([source.labels[si], np.zeros(b, np.int64)])
            leaves = as_graph_leaves(work)
            lab, dom = forward(weeks, leaves, lam, training=True, rng=drop_rng, config=architecture,
                               buffers=work.buffers)
            l_loss = ad.softmax_cross_entropy(lab, labels, label_mask)
            d_loss = ad.softmax_cross_entropy(dom, domain_labels)
            loss = ad.add(l_loss, d_loss)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch, last_good)
            ad.backward(loss)
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            try:
                opt.step(work.tensors, grads, lr)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(str(exc), epoch, last_good) from exc
            l_sum += float(l_loss.data)
            d_sum += float(d_loss.data)
        snapshot = work.astype(np.float64)
        acc_tr, dacc_tr = train_eval.metrics(snapshot)
        acc_te, dacc_te = test_eval.metrics(snapshot) if test_eval else (float("nan"), float("nan"))
        nb = max(len(batches), 1)
        rec = EpochRecord(epoch, lr, lam, acc_tr, acc_te, dacc_tr, dacc_te, l_sum / nb, d_sum / nb)
        history.append(rec)
        last_good = snapshot
        if epoch >= first_ckpt:
            checkpoints[epoch] = snapshot
            if checkpoint_dir is not None:
                save_checkpoint(os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"), snapshot,
                                extra={"epoch": epoch})
        log.info("epoch %d lr=%.1e lam=%.4f label=%.3f/%.3f domain=%.3f/%.3f", epoch, lr, lam,
                 acc_tr, acc_te, dacc_tr, dacc_te)
        if progress is not None:
            progress(rec)
    best, best_epoch = select_best(history, checkpoints, config.best_window)
    return TrainResult(history, checkpoints, best, best_epoch, last_good)


def _group_slices(X, groups):
    """Subject order of first appearance and the owner index of each slice."""
    uniq, first, owner = np.unique(np.asarray(groups), return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return uniq[order], rank[owner.reshape(-1)], first[order]


class DANNRiskClassifier(ClassifierMixin, BaseEstimator):
    """Domain-adversarial risk classifier over ``(n_slices, 7, 96)`` week slices.

    ``fit`` takes per-slice labels ``y`` (1 disease, 0 healthy, -1 unknown),
    ``domain`` (0 source, 1 target), subject ``groups`` and optional ``ages``
    used for age balancing. ``decision_function`` returns disease log-odds.
    """

    def __init__(self, train_config=None, architecture=None, test_fraction=0.2, balance_ages=True,
                 checkpoint_dir=None):
        self.train_config = train_config
        self.architecture = architecture
        self.test_fraction = test_fraction
        self.balance_ages = balance_ages
        self.checkpoint_dir = checkpoint_dir

    def _split_domain(self, X, y, groups, ages, rows):
        sids, owner, first = _group_slices(X[rows], groups[rows])
        labels = y[rows][first]
        sub_ages = None if ages is None else ages[rows][first]
        for s in range(sids.size):
            if np.unique(y[rows][owner == s]).size > 1:
                raise ValueError(f"subject {sids[s]!r} has inconsistent labels")
        return DomainData(X[rows], owner, labels, sub_ages, sids)

    def fit(self, X, y, domain, groups=None, ages=None):
        cfg = self.train_config or TrainConfig()
        if isinstance(cfg, dict):
            cfg = TrainConfig.from_dict(cfg)
        X = check_weeks(X)
        y = check_binary(y, allow_unknown=True)
        domain = check_binary(domain, "domain")
        groups = np.arange(len(X)) if groups is None else np.asarray(groups)
        ages = None if ages is None else np.asarray(ages, dtype=np.float64).reshape(-1)
        check_consistent_length(X, y, domain, groups, ages)
        if np.any(y[domain == 0] < 0):
            raise ValueError("source slices need labels")
        self.classes_ = np.array([0, 1])
        src = self._split_domain(X, y, groups, ages, np.flatnonzero(domain == 0))
        tgt = self._split_domain(X, np.where(domain == 1, -1, y), groups, ages, np.flatnonzero(domain == 1))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        if self.balance_ages and ages is not None:
            ks, kt = balance_age_distribution(src.ages, tgt.ages, rng)
            src, tgt = src.subset(ks), tgt.subset(kt)
        splits = []
        for data in (src, tgt):
            perm = rng.permutation(data.n_subjects)
            n_test = int(round(self.test_fraction * data.n_subjects))
            splits.append((data.subset(np.sort(perm[n_test:])),
                           data.subset(np.sort(perm[:n_test])) if n_test else None))
        (src_tr, src_te), (tgt_tr, tgt_te) = splits
        result = train(cfg, src_tr, tgt_tr, src_te, tgt_te, self.architecture, checkpoint_dir=self.checkpoint_dir)
        self.params_ = result.best
        self.best_epoch_ = result.best_epoch
        self.history_ = result.history
        self.final_params_ = result.final
        self.train_subjects_ = (src_tr.subject_ids, tgt_tr.subject_ids)
        self.test_subjects_ = (None if src_te is None else src_te.subject_ids,
                               None if tgt_te is None else tgt_te.subject_ids)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        lab, _ = _eval_logits(self.params_, check_weeks(X))
        return log_odds(lab)

    def predict_proba(self, X):
        z = self.decision_function(X)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)

    def domain_accuracy(self, X, domain):
        check_is_fitted(self, "params_")
        _, dl = _eval_logits(self.params_, check_weeks(X))
        domain = check_binary(domain, "domain")
        hit = dl.argmax(1) == domain
        return float(np.mean([hit[domain == d].mean() for d in (0, 1) if np.any(domain == d)]))
