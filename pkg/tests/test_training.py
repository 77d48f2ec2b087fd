import json
from dataclasses import replace

import numpy as np
import pytest

from blmrobust.attack import PgdConfig
from blmrobust.errors import DatasetClassMissing, EmptyDataset, ValidationError
from blmrobust.model import BUFFERS, TRAINABLE, build_model
from blmrobust.pipeline import preprocess
from blmrobust.threat import StructuredBudget
from blmrobust.training import (
    TrainConfig,
    TrainLog,
    _Trainer,
    accuracy,
    finetune_adversarial,
    finetune_config,
    train_clean,
)

from conftest import BUDGET, CLEAN_TRAIN, DESK


def small(dataset, n=48):
    """Dataset with the first ``n`` train windows of each class and a short val split."""
    idx = np.concatenate([np.flatnonzero(dataset.train.labels == c)[: n // 3] for c in range(3)])
    return replace(dataset, train=dataset.train.subset(np.sort(idx)),
                   val=dataset.val.subset(np.arange(24)))


def test_config_invariants():
    with pytest.raises(ValidationError):
        TrainConfig(mode="clean", adv_fraction=0.5)
    with pytest.raises(ValidationError):
        TrainConfig(mode="adv_finetune")
    cfg = finetune_config(CLEAN_TRAIN, BUDGET)
    assert cfg.adv_fraction == 0.5 and cfg.pgd.steps == 10
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValidationError):
        finetune_config(CLEAN_TRAIN, BUDGET, adv_fraction=1.5)


def test_zero_learning_rate_only_moves_running_stats(dataset):
    p0 = build_model(DESK, 3)
    p1, log = train_clean(p0, small(dataset), TrainConfig(epochs=1, learning_rate=0.0))
    for k in TRAINABLE:
        assert p1[k].tobytes() == p0[k].tobytes(), k
    assert any(p1[k].tobytes() != p0[k].tobytes() for k in BUFFERS)
    assert len(log.epochs) == 1


def test_separable_two_class_loss_decreases(dataset):
    """Oracle: on a separable subset, epoch loss goes strictly down."""
    ws = dataset.train
    idx = np.concatenate([np.flatnonzero(ws.labels == 0)[:24], np.flatnonzero(ws.labels == 2)[:24]])
    z = preprocess(ws.windows[idx]).z
    labels = ws.labels[idx]
    params = build_model(replace(DESK, dropout_rate=0.0), 0)
    trainer = _Trainer(params, TrainConfig(learning_rate=0.02))
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(5):
        order = rng.permutation(len(idx))
        total = 0.0
        for lo in range(0, len(idx), 16):
            b = order[lo:lo + 16]
            total += trainer.step(z[b], labels[b], rng)[0] * b.size
        losses.append(total / len(idx))
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_missing_class_and_empty(dataset):
    ws = dataset.train
    two = replace(dataset, train=ws.subset(np.flatnonzero(ws.labels != 1)))
    with pytest.raises(DatasetClassMissing):
        train_clean(build_model(DESK, 0), two, CLEAN_TRAIN)
    empty = replace(dataset, train=ws.subset(np.zeros(0, int)))
    with pytest.raises(EmptyDataset):
        train_clean(build_model(DESK, 0), empty, CLEAN_TRAIN)


def test_clean_model_is_accurate(clean_run, dataset):
    params, log = clean_run
    assert log.final_val_acc >= 0.90
    assert accuracy(params, dataset.val.windows, dataset.val.labels) == log.final_val_acc
    assert all(np.isfinite(e["loss"]) for e in log.epochs)
    assert log.fingerprint == params.fingerprint()


def test_training_is_deterministic(dataset):
    data = small(dataset)
    cfg = TrainConfig(epochs=2, seed=5)
    a, la = train_clean(build_model(DESK, 1), data, cfg)
    b, lb = train_clean(build_model(DESK, 1), data, cfg)
    assert a.fingerprint() == b.fingerprint()
    assert la.to_dict() == lb.to_dict()


def test_zero_fraction_is_continued_clean_training(clean_model, dataset):
    data = small(dataset)
    base = TrainConfig(epochs=2, learning_rate=0.01, seed=4)
    clean, _ = train_clean(clean_model, data, base)
    adv, log = finetune_adversarial(clean_model, data, finetune_config(base, BUDGET, adv_fraction=0.0))
    assert adv.fingerprint() == clean.fingerprint()
    assert all(e["n_adv"] == 0 for e in log.epochs)


def test_finetune_rejects_zero_budget(clean_model, dataset):
    cfg = finetune_config(CLEAN_TRAIN, StructuredBudget.from_pair(0.0, 0.0))
    with pytest.raises(ValidationError):
        finetune_adversarial(clean_model, dataset, cfg)
    with pytest.raises(ValidationError):
        finetune_adversarial(clean_model, dataset, CLEAN_TRAIN)


def test_finetune_counts_and_determinism(clean_model, dataset):
    data = small(dataset, n=30)
    cfg = finetune_config(TrainConfig(epochs=1, batch_size=8, learning_rate=0.01, seed=2), BUDGET,
                          adv_fraction=0.5, pgd=PgdConfig(steps=3, seed=0))
    a, la = finetune_adversarial(clean_model, data, cfg)
    b, lb = finetune_adversarial(clean_model, data, cfg)
    assert a.fingerprint() == b.fingerprint()
    # batches of 8, 8, 8, 6: half of each is adversarial
    assert la.epochs[0]["n_adv"] == 4 + 4 + 4 + 3


def test_finetune_keeps_clean_accuracy(adv_run, clean_model, dataset):
    adv, log = adv_run
    before = accuracy(clean_model, dataset.test.windows, dataset.test.labels)
    after = accuracy(adv, dataset.test.windows, dataset.test.labels)
    assert abs(after - before) <= 0.02
    assert len(log.epochs) == 3 and all(e["n_adv"] > 0 for e in log.epochs)


def test_log_files(tmp_path, clean_run):
    _, log = clean_run
    log.write(tmp_path / "log.csv", tmp_path / "log.json")
    rows = (tmp_path / "log.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,loss,train_acc,val_acc,n_adv"
    assert len(rows) == 1 + CLEAN_TRAIN.epochs
    d = json.loads((tmp_path / "log.json").read_text())
    assert d["final_val_acc"] == log.final_val_acc
    assert TrainLog(**{k: d[k] for k in ("config", "epochs", "fingerprint")}).to_dict() == d


@pytest.mark.slow
def test_thirty_epoch_training_reaches_target(dataset):
    _, log = train_clean(build_model(DESK, 0), dataset, replace(CLEAN_TRAIN, epochs=30))
    assert log.final_val_acc >= 0.90
