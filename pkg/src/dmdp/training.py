"""Prompt tuning on a frozen backbone: schedule, loop, metrics and run aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import EncodedSet
from .encoder import DualEncoderParams
from .errors import ConfigurationError, ContractViolation, FrozenParameterError
from .optim import SGD
from .prompts import PromptBank, PromptConfig, dmdp_forward, frozen_features


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 0.0035
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    epochs: int = 100
    seed: int = 0
    select_on: str = "acc"
    momentum: float = 0.9

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("train.epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("train.warmup_epochs must lie in [0, epochs)")
        if self.select_on not in ("acc", "macro_f1"):
            raise ConfigurationError(f"train.select_on must be 'acc' or 'macro_f1', got {self.select_on!r}")
        if self.lr < 0 or self.warmup_lr < 0:
            raise ConfigurationError("learning rates must be non-negative")
        return self


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Constant ``warmup_lr`` for the warmup epochs, then cosine from ``lr`` to 0.

    The last step of the last epoch lands exactly on 0.
    """
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_lr
    span = cfg.epochs * steps_per_epoch - warm - 1
    if span <= 0:
        return cfg.lr
    progress = min(1.0, (step - warm) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple[float, float]
    confusion: tuple[tuple[int, int], tuple[int, int]]  # [true][pred]

    def to_dict(self) -> dict:
        return {
            "acc": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
            "confusion": [list(r) for r in self.confusion],
        }


def compute_metrics(labels, predictions) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ContractViolation("metrics need at least one sample")
    if labels.shape != preds.shape:
        raise ContractViolation(f"labels {labels.shape} vs predictions {preds.shape}")
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    f1 = []
    for k in (0, 1):
        tp = conf[k, k]
        denom = 2 * tp + conf[k, 1 - k] + conf[1 - k, k]
        f1.append(2 * tp / denom if denom else 0.0)
    return Metrics(
        accuracy=float(np.trace(conf) / conf.sum()),
        macro_f1=float((f1[0] + f1[1]) / 2),
        per_class_f1=(float(f1[0]), float(f1[1])),
        confusion=tuple(tuple(int(v) for v in row) for row in conf),
    )


def predict(frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig, data: EncodedSet,
            features=None, batch_size: int = 256) -> np.ndarray:
    if len(data) == 0:
        raise ContractViolation("cannot evaluate on an empty set")
    preds = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        feats = None if features is None else (features[0][sl], features[1][sl])
        out = dmdp_forward(frozen, bank, cfg, data.images[sl], data.token_ids[sl], data.eos_index[sl], feats)
        preds.append(np.argmax(out.logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig, test_set: EncodedSet,
             features=None) -> Metrics:
    return compute_metrics(test_set.labels, predict(frozen, bank, cfg, test_set, features))


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_bank: PromptBank
    best_epoch: int
    history: list[dict] = field(default_factory=list)

    def history_json(self) -> str:
        return json.dumps({"best_epoch": self.best_epoch, "epochs": self.history}, indent=2) + "\n"


def _features(frozen: DualEncoderParams, data: EncodedSet, batch_size: int = 256):
    parts = [frozen_features(frozen, data.images[s : s + batch_size], data.token_ids[s : s + batch_size],
                             data.eos_index[s : s + batch_size]) for s in range(0, len(data), batch_size)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def train(frozen: DualEncoderParams, bank: PromptBank, tcfg: TrainConfig, pcfg: PromptConfig,
          train_set: EncodedSet, val_set: EncodedSet, log=None) -> TrainResult:
    """Train ``bank`` in place and return the best-on-validation snapshot."""
    tcfg.validate()
    if not frozen.frozen:
        raise ConfigurationError("backbone must be frozen before prompt tuning")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractViolation("train and validation sets must be non-empty")
    backbone = frozen.leaves()
    opt = SGD(bank.leaves(), momentum=tcfg.momentum)
    rng = np.random.default_rng(tcfg.seed)
    tr_feats = _features(frozen, train_set)
    va_feats = _features(frozen, val_set)
    spe = math.ceil(len(train_set) / tcfg.batch_size)
    history, best, best_score, best_epoch, step = [], bank.clone(), -1.0, -1, 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s : s + tcfg.batch_size]
            opt.zero_grad()
            out = dmdp_forward(frozen, bank, pcfg, train_set.images[idx], train_set.token_ids[idx],
                               train_set.eos_index[idx], (tr_feats[0][idx], tr_feats[1][idx]))
            loss = ad.cross_entropy_with_logits(out.logits, train_set.labels[idx])
            ad.backward(loss)
            if any(t.grad is not None for t in backbone):
                raise FrozenParameterError("a backbone leaf received a gradient")
            lr = lr_at(step, tcfg, spe)
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        val = evaluate(frozen, bank, pcfg, val_set, va_feats)
        score = val.accuracy if tcfg.select_on == "acc" else val.macro_f1
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
               "val_acc": val.accuracy, "val_macro_f1": val.macro_f1}
        history.append(row)
        if log is not None:
            log(row)
        if score > best_score:
            best, best_score, best_epoch = bank.clone(), score, epoch
    return TrainResult(best, best_epoch, history)


# ----------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class RunRecord:
    seed: int
    split: int
    metrics: Metrics


@dataclass(frozen=True)
class MetricSummary:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple[float, float]

    def to_dict(self) -> dict:
        return {"acc": self.accuracy, "macro_f1": self.macro_f1, "per_class_f1": list(self.per_class_f1)}


@dataclass(frozen=True)
class RunReport:
    runs: tuple[RunRecord, ...]
    mean: MetricSummary
    std: MetricSummary

    def to_dict(self) -> dict:
        return {
            "runs": [{"seed": r.seed, "split": r.split, "acc": r.metrics.accuracy, "macro_f1": r.metrics.macro_f1}
                     for r in self.runs],
            "mean": self.mean.to_dict(),
            "std": self.std.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def accuracies(self) -> np.ndarray:
        return np.array([r.metrics.accuracy for r in self.runs])


def aggregate_runs(runs) -> RunReport:
    """Mean and population standard deviation of each metric over ``runs``."""
    runs = tuple(runs)
    if not runs:
        raise ContractViolation("aggregate_runs needs at least one run")
    table = np.array([[r.metrics.accuracy, r.metrics.macro_f1, *r.metrics.per_class_f1] for r in runs])
    mu, sd = table.mean(axis=0), table.std(axis=0)

    def summary(v):
        return MetricSummary(float(v[0]), float(v[1]), (float(v[2]), float(v[3])))

    return RunReport(runs, summary(mu), summary(sd))
