import math

import numpy as np
import pytest

from locorisk.model import ArchitectureConfig
from locorisk.trainer import (DANNRiskClassifier, DomainData, EpochRecord, TrainConfig, balance_age_distribution,
                              lambda_schedule, lr_schedule, make_batches, select_best, train, write_curves_csv)

TINY_ARCH = ArchitectureConfig(n_units=1)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_lambda_boundaries():
    assert lambda_schedule(0) == 0.0 and lambda_schedule(99) == 0.0
    assert lambda_schedule(100) == pytest.approx(0.1 * sigmoid(-5), rel=1e-12)
    assert lambda_schedule(100) == pytest.approx(6.693e-4, rel=1e-3)
    assert lambda_schedule(119) == lambda_schedule(100)
    assert lambda_schedule(120) == pytest.approx(0.1 * sigmoid(-5 + 9 / 14), rel=1e-12)
    assert lambda_schedule(399) == pytest.approx(0.1 * sigmoid(4), rel=1e-12)
    assert lambda_schedule(399) == pytest.approx(9.820e-2, rel=1e-3)
    for e in (400, 450, 599):
        assert lambda_schedule(e) == 0.1


def test_lambda_ramp_is_stepwise_and_monotone():
    vals = [lambda_schedule(e) for e in range(100, 400)]
    assert len(set(vals)) == 15
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_lr_boundaries():
    expect = {0: 5e-3, 19: 5e-3, 20: 2e-3, 59: 2e-3, 60: 1e-3, 99: 1e-3, 100: 1e-3, 449: 1e-3,
              450: 3e-4, 499: 3e-4, 500: 1e-5, 599: 1e-5}
    for e, lr in expect.items():
        assert lr_schedule(e) == lr
    with pytest.raises(ValueError):
        lr_schedule(600)


def test_ablation_and_scaled_config():
    cfg = TrainConfig(ablation_lambda_zero=True)
    assert all(lambda_schedule(e, cfg) == 0.0 for e in range(600))
    s = TrainConfig.scaled(10)
    assert s.total_epochs == 60 and s.epochs_phase1 == 10 and s.ramp_steps == 15
    assert lambda_schedule(10, s) == pytest.approx(0.1 * sigmoid(-5))
    assert lambda_schedule(39, s) == pytest.approx(0.1 * sigmoid(4))
    assert lambda_schedule(40, s) == 0.1
    assert lr_schedule(45, s) == 3e-4 and lr_schedule(59, s) == 1e-5
    assert TrainConfig.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(ramp_epochs=310)


def test_balance_ages():
    rng = np.random.default_rng(0)
    src = rng.uniform(40, 90, 3000)
    tgt = rng.uniform(45, 70, 800)
    ks, kt = balance_age_distribution(src, tgt, rng=1)
    edges = np.arange(45, 90, 5)
    hs, _ = np.histogram(src[ks], edges)
    ht, _ = np.histogram(tgt[kt], edges)
    assert np.array_equal(hs, ht)
    assert src[ks].min() >= 45 and src[ks].max() < 85
    assert np.all(np.diff(ks) > 0)
    with pytest.raises(ValueError):
        balance_age_distribution([10.0], [95.0])


def test_make_batches():
    rng = np.random.default_rng(1)
    batches = make_batches(200, 150, 64, rng)
    assert len(batches) == 2
    seen_s = np.concatenate([s for s, _ in batches])
    assert len(set(seen_s.tolist())) == seen_s.size
    assert all(len(s) == 64 and len(t) == 64 for s, t in batches)
    with pytest.raises(ValueError, match="at least 64"):
        make_batches(63, 100, 64, rng)


def test_select_best_prefers_latest_on_tie():
    hist = [EpochRecord(e, 1e-3, 0.1, acc, 0, 0.5, 0.5, 0, 0) for e, acc in enumerate([0.9, 0.7, 0.8, 0.8])]
    ckpts = {1: "c1", 2: "c2", 3: "c3"}
    assert select_best(hist, ckpts, 3) == ("c3", 3)
    hist[1].label_acc_train = 0.95
    assert select_best(hist, ckpts, 3) == ("c1", 1)


def test_domain_data_subset_and_pick():
    weeks = np.arange(5 * 7 * 96, dtype=float).reshape(5, 7, 96)
    d = DomainData(weeks, [0, 1, 1, 2, 0], [1, 0, -1], ages=[50, 60, 70], subject_ids=["a", "b", "c"])
    sub = d.subset([2, 0])
    assert sub.subject_ids.tolist() == ["c", "a"] and sub.labels.tolist() == [-1, 1]
    assert sub.n_subjects == 2 and sub.weeks.shape[0] == 3
    got = d.pick([1], np.random.default_rng(0))[0]
    assert any(np.array_equal(got, weeks[i]) for i in (1, 2))
    with pytest.raises(ValueError):
        DomainData(weeks, [0, 0, 0, 0, 0], [1, 0])


def _toy_domains(seed, n=96):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 2, n)
    src = rng.gamma(2.0, 4.0, size=(n, 7, 96)) * (1 + lab)[:, None, None]
    tgt = rng.gamma(2.0, 4.0, size=(n, 7, 96))
    return DomainData(src, np.arange(n), lab), DomainData(tgt, np.arange(n), -np.ones(n, int))


def _tiny_config(**kw):
    base = dict(batch_size_per_domain=32, epochs_phase1=2, phase1_lr_epochs=(1, 1, 0), ramp_epochs=2,
                ramp_step_epochs=1, plateau_epochs=1, decay_epochs=1, final_epochs=1, best_window=2,
                eval_subsample=40)
    base.update(kw)
    return TrainConfig(**base)


def test_tiny_training_is_deterministic(tmp_path):
    src, tgt = _toy_domains(2)
    cfg = _tiny_config()
    a = train(cfg, src, tgt, architecture=TINY_ARCH, checkpoint_dir=tmp_path)
    b = train(cfg, src, tgt, architecture=TINY_ARCH)
    assert len(a.history) == cfg.total_epochs
    assert a.history[0].row()[:3] == [0, 5e-3, 0.0]
    for k in a.best.tensors:
        assert a.best.tensors[k].tobytes() == b.best.tensors[k].tobytes()
    assert a.best_epoch in (cfg.total_epochs - 2, cfg.total_epochs - 1)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0005.ckpt", "epoch_0006.ckpt"]
    write_curves_csv(tmp_path / "curves.csv", a.history)
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,lr,lambda") and len(lines) == cfg.total_epochs + 1


def test_training_rejects_unlabeled_source():
    src, tgt = _toy_domains(3)
    src.labels[0] = -1
    with pytest.raises(ValueError):
        train(_tiny_config(), src, tgt, architecture=TINY_ARCH)


def test_classifier_api():
    src, tgt = _toy_domains(4, n=80)
    X = np.concatenate([src.weeks, tgt.weeks])
    y = np.concatenate([src.labels, tgt.labels])
    dom = np.r_[np.zeros(80, int), np.ones(80, int)]
    clf = DANNRiskClassifier(_tiny_config(batch_size_per_domain=16), TINY_ARCH, test_fraction=0.25)
    assert clf.get_params()["test_fraction"] == 0.25
    clf.fit(X, y, dom)
    proba = clf.predict_proba(X[:5])
    assert proba.shape == (5, 2) and np.allclose(proba.sum(1), 1.0)
    assert set(clf.predict(X).tolist()) <= {0, 1}
    assert 0.0 <= clf.domain_accuracy(X, dom) <= 1.0
    assert len(clf.test_subjects_[0]) == 20
    with pytest.raises(ValueError):
        clf.fit(X, np.where(dom == 0, -1, y), dom)
    with pytest.raises(ValueError):
        clf.fit(X[:, :, :90], y, dom)
