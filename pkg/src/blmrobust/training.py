"""Clean training and PGD adversarial fine-tuning of the window classifier.

Shuffling and dropout draw from one generator, adversarial example generation
from another, so fine-tuning with ``adv_fraction=0`` replays clean training
exactly.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attack import AttackConfigKind, PgdConfig, WrappedObjective, pgd_batch, sample_rng
from .errors import DatasetClassMissing, DivergedLoss, EmptyDataset, ValidationError
from .model import TRAINABLE, build_logits, dropout_masks, param_nodes, update_running_stats
from .pipeline import channel_stats, classify_batch, preprocess
from .threat import StructuredBudget, assemble_delta_array


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "clean"
    adv_fraction: float = None
    pgd: PgdConfig = None
    budget: StructuredBudget = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("bad learning rate or momentum")
        if self.mode == "clean":
            if self.adv_fraction is not None or self.budget is not None:
                raise ValidationError("adversarial settings given for clean training")
        elif self.mode == "adv_finetune":
            if self.budget is None:
                raise ValidationError("adversarial fine-tuning needs budgets")
            if self.adv_fraction is None:
                object.__setattr__(self, "adv_fraction", 0.5)
            if self.pgd is None:
                object.__setattr__(self, "pgd", PgdConfig(steps=10))
            if not 0 <= self.adv_fraction <= 1:
                raise ValidationError("adv_fraction must lie in [0, 1]")
        else:
            raise ValidationError(f"unknown training mode {self.mode!r}")

    def to_dict(self):
        d = {"epochs": self.epochs, "batch_size": self.batch_size,
             "learning_rate": self.learning_rate, "momentum": self.momentum,
             "seed": self.seed, "mode": self.mode}
        if self.mode == "adv_finetune":
            d.update(adv_fraction=self.adv_fraction, pgd=self.pgd.to_dict(),
                     budget=self.budget.to_dict())
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "pgd" in d and d["pgd"] is not None:
            d["pgd"] = PgdConfig.from_dict(d["pgd"])
        if "budget" in d and d["budget"] is not None:
            d["budget"] = StructuredBudget.from_dict(d["budget"])
        return cls(**d)


@dataclass
class TrainLog:
    config: dict
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, train_acc, val_acc
    fingerprint: str = ""

    @property
    def final_val_acc(self):
        return self.epochs[-1]["val_acc"] if self.epochs else float("nan")

    def to_dict(self):
        return {"config": self.config, "epochs": self.epochs, "fingerprint": self.fingerprint,
                "final_val_acc": self.final_val_acc}

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "train_acc", "val_acc", "n_adv"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["loss"]), repr(e["train_acc"]), repr(e["val_acc"]),
                            e.get("n_adv", 0)])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


class _Trainer:
    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self._graphs = {}
        self.velocity = {k: np.zeros_like(params.arrays[k]) for k in TRAINABLE}

    def graph(self, batch):
        if batch not in self._graphs:
            acfg = self.params.cfg
            g = ad.Graph()
            z = g.input("z", (batch, acfg.input_len, acfg.input_channels))
            onehot = g.input("onehot", (batch, acfg.num_classes))
            pn = param_nodes(g, self.params, trainable=True)
            masks = None
            if acfg.dropout_rate > 0:
                masks = {k: g.input(k) for k in ("drop1", "drop2")}
            fw = build_logits(z, pn, acfg, mode="train", drop_masks=masks)
            g.set_output(ad.mean(ad.softmax_xent(fw.logits, onehot)))
            self._graphs[batch] = (g, fw)
        return self._graphs[batch]

    def step(self, z, labels, rng):
        acfg = self.params.cfg
        g, fw = self.graph(z.shape[0])
        bind = {"onehot": np.eye(acfg.num_classes)[labels], "z": z}
        bind.update(self.params.arrays)
        masks = dropout_masks(acfg, z.shape[0], rng)
        if masks is not None:
            bind.update(masks)
        vals = ad.forward_eval(g, bind, check_finite=False)
        loss = float(vals[g.output.id])
        if not np.isfinite(loss):
            raise DivergedLoss("training loss is not finite")
        grads = ad.backward_grad(g, bind, set(TRAINABLE), values=vals, check_finite=False)
        lr, mom = self.cfg.learning_rate, self.cfg.momentum
        for k in TRAINABLE:
            if not np.all(np.isfinite(grads[k])):
                raise DivergedLoss(f"non-finite gradient for {k}")
            self.velocity[k] = mom * self.velocity[k] + grads[k]
            self.params.arrays[k] = self.params.arrays[k] - lr * self.velocity[k]
        update_running_stats(
            self.params,
            {name: (vals[m.id], vals[v.id]) for name, (m, v) in fw.batch_stats.items()},
            z.shape[0] * z.shape[1],
        )
        pred = np.argmax(vals[fw.logits.id], axis=1)
        return loss, int((pred == labels).sum())


def accuracy(params, windows, labels, chunk=128):
    if len(labels) == 0:
        return float("nan")
    correct = 0
    for lo in range(0, len(labels), chunk):
        correct += int((classify_batch(params, windows[lo:lo + chunk])[1] == labels[lo:lo + chunk]).sum())
    return correct / len(labels)


def _check_classes(train, num_classes):
    if len(train) == 0:
        raise EmptyDataset("training split is empty")
    counts = np.bincount(train.labels, minlength=num_classes)
    if np.any(counts == 0):
        raise DatasetClassMissing(f"training split lacks classes {np.flatnonzero(counts == 0).tolist()}")


def adversarial_windows(params, xs, labels, budget, pgd_cfg, rngs):
    """Baseline-wrapper PGD examples against ``labels``, all steps, no early stop."""
    obj = WrappedObjective(AttackConfigKind.BASELINE, params, xs, labels, budget)
    res = pgd_batch(obj, xs.shape[0], obj.shape, pgd_cfg, rngs, early_stop=False)
    sigma = channel_stats(xs)[1]
    return xs + sigma * assemble_delta_array(res.u, budget)


def _fit(params0, dataset, cfg):
    params = params0.copy()
    train = dataset.train
    _check_classes(train, params.cfg.num_classes)
    trainer = _Trainer(params, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0]))
    attack_seed = int(np.random.SeedSequence([int(cfg.seed), 1]).generate_state(1)[0])
    z_all = preprocess(train.windows).z
    log = TrainLog(cfg.to_dict())
    n = len(train)
    adv_count = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, correct, n_adv = 0.0, 0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            z = z_all[idx]
            labels = train.labels[idx]
            if cfg.mode == "adv_finetune" and cfg.adv_fraction > 0:
                k = int(round(cfg.adv_fraction * idx.size))
                if k:
                    # the first k shuffled samples of the batch become adversarial
                    rngs = [sample_rng(attack_seed, adv_count + j) for j in range(k)]
                    adv_count += k
                    x_adv = adversarial_windows(params, train.windows[idx[:k]], labels[:k],
                                                cfg.budget, cfg.pgd, rngs)
                    z = z.copy()
                    z[:k] = preprocess(x_adv).z
                    n_adv += k
            loss, c = trainer.step(z, labels, rng)
            total += loss * idx.size
            correct += c
        log.epochs.append({
            "epoch": epoch,
            "loss": total / n,
            "train_acc": correct / n,
            "val_acc": accuracy(params, dataset.val.windows, dataset.val.labels),
            "n_adv": n_adv,
        })
    log.fingerprint = params.fingerprint()
    return params, log


def train_clean(params0, dataset, cfg):
    """Minibatch SGD on cross-entropy; returns new parameters and the log."""
    if cfg.mode != "clean":
        cfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.seed)
    return _fit(params0, dataset, cfg)


def finetune_adversarial(params_clean, dataset, cfg):
    """Continue training with a fraction of every batch replaced by PGD examples."""
    if cfg.mode != "adv_finetune":
        raise ValidationError("finetune_adversarial needs mode='adv_finetune'")
    if cfg.budget.is_zero:
        raise ValidationError("adversarial fine-tuning needs positive budgets")
    return _fit(params_clean, dataset, cfg)


def finetune_config(base, budget, adv_fraction=0.5, pgd=None, **overrides):
    """Adversarial fine-tuning config derived from a clean one."""
    return replace(base, mode="adv_finetune", budget=budget, adv_fraction=adv_fraction,
                   pgd=pgd or PgdConfig(steps=10), **overrides)
