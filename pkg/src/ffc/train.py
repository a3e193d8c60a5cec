"""Training loop, evaluation reports and multi-model ensembling."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentPolicy, batch_iter
from .errors import ConfigError, DivergenceError, NumericError
from .head import EnsembleRule, FfcOutputs, ensemble_predict, head_statistics, train_loss
from .layers import softmax
from .optim import SGD, learning_rate, mixup_batch

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    epoch: object = None
    train_loss: object = None
    lr: object = None
    per_head: list = field(default_factory=list)
    vote_top1: float = None
    avg_softmax_top1: float = None
    ensemble: dict = field(default_factory=dict)
    wall_seconds: float = None

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_seconds")
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def checkpoint_policy(config):
    """Evaluation policy carrying the normalization stored with a checkpoint."""
    norm = config.get("data", {})
    return AugmentPolicy(
        normalize_mean=tuple(norm.get("mean", ())), normalize_std=tuple(norm.get("std", ()))
    )


def collect_outputs(model, dataset, batch_size=256, policy=None):
    """Run the model over ``dataset`` in order and concatenate its outputs."""
    policy = (policy or AugmentPolicy()).without_augmentation()
    logits, feats = None, None
    counts = []
    for x, _ in batch_iter(dataset, batch_size, shuffle=False, policy=policy):
        out = model.forward(x)
        model.head._cache = None
        if logits is None:
            logits = [[] for _ in out.logits]
            feats = [[] for _ in out.features]
        for acc, lg in zip(logits, out.logits):
            acc.append(lg)
        for acc, f in zip(feats, out.features):
            acc.append(f)
        counts.append(out.active_counts)
    return FfcOutputs(
        logits=[np.concatenate(a) for a in logits],
        features=[np.concatenate(a) for a in feats],
        active_counts=np.concatenate(counts, axis=1),
    )


def summarize(outputs, labels, rules=(EnsembleRule.VOTE, EnsembleRule.AVERAGE_SOFTMAX)):
    """Table-style report fields for precomputed outputs."""
    rules = [EnsembleRule.parse(r) for r in rules]
    labels = np.asarray(labels)
    ensemble = {r.value: float((ensemble_predict(outputs, r) == labels).mean()) for r in rules}
    return {
        "per_head": head_statistics(outputs, labels),
        "ensemble": ensemble,
        "vote_top1": ensemble.get(EnsembleRule.VOTE.value),
        "avg_softmax_top1": ensemble.get(EnsembleRule.AVERAGE_SOFTMAX.value),
    }


def evaluate(model, dataset, rules=(EnsembleRule.VOTE, EnsembleRule.AVERAGE_SOFTMAX),
             batch_size=256, policy=None):
    if dataset.num_classes != model.cfg.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes but model predicts {model.cfg.num_classes}"
        )
    start = time.perf_counter()
    outputs = collect_outputs(model, dataset, batch_size, policy)
    rec = MetricsRecord(**summarize(outputs, dataset.labels, rules))
    rec.wall_seconds = time.perf_counter() - start
    return rec


def train(model, train_set, eval_set, cfg, policy=None, out_dir=None,
          rules=(EnsembleRule.VOTE, EnsembleRule.AVERAGE_SOFTMAX), eval_batch_size=256,
          checkpoint_extra=None):
    """Momentum SGD over ``cfg.epochs`` epochs; yields one MetricsRecord per epoch.

    With ``out_dir`` set, ``last.ffck`` always holds the latest finite state and
    ``final.ffck`` is written after the last epoch. A non-finite loss aborts
    with :class:`DivergenceError`, leaving ``last.ffck`` untouched.
    """
    if train_set.num_classes != model.cfg.num_classes:
        raise ConfigError(
            f"dataset has {train_set.num_classes} classes but model predicts {model.cfg.num_classes}"
        )
    policy = policy or AugmentPolicy()
    k = model.cfg.num_classes
    params = model.head.params() if cfg.freeze_backbone else model.params()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    last = os.path.join(out_dir, "last.ffck") if out_dir else None
    extra = {"train": cfg.to_dict(), **(checkpoint_extra or {})}
    if last:
        ckpt.save_checkpoint(model, last, extra)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        mix_rng = np.random.default_rng([cfg.seed, epoch, 2])
        total, seen = 0.0, 0
        for x, y in batch_iter(train_set, cfg.batch_size, True, cfg.seed, policy, epoch):
            targets = y
            if cfg.mixup_alpha > 0 and len(y) >= 2:
                x, targets = mixup_batch(x, y, cfg.mixup_alpha, mix_rng, num_classes=k)
            out = model.forward(x)
            try:
                loss, grads = train_loss(out, targets, cfg.label_smoothing)
            except NumericError:
                loss = math.nan
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: {last}", last
                )
            opt.zero_grad()
            model.backward(grads, through_backbone=not cfg.freeze_backbone, input_grad=False)
            opt.step(lr)
            total += loss * len(y)
            seen += len(y)
        rec = evaluate(model, eval_set, rules, eval_batch_size, policy) if eval_set is not None \
            else MetricsRecord()
        rec.epoch, rec.lr, rec.train_loss = epoch + 1, lr, total / seen
        rec.wall_seconds = time.perf_counter() - start
        if last:
            ckpt.save_checkpoint(model, last, extra)
        log.info("epoch %d lr %.4g loss %.4f vote %s", rec.epoch, lr, rec.train_loss, rec.vote_top1)
        yield rec
    if out_dir:
        ckpt.save_checkpoint(model, os.path.join(out_dir, "final.ffck"), extra)


def write_metrics(records, path, timing=True):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json(timing) + "\n")


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        return [MetricsRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def model_distribution(model, dataset, batch_size=256, policy=None):
    """Per-sample class distribution: the mean of the head softmaxes."""
    out = collect_outputs(model, dataset, batch_size, policy)
    return np.mean([softmax(lg.astype(np.float64)) for lg in out.logits], axis=0)


def ensemble_models(models, dataset, batch_size=256, policy=None):
    """Accuracy of the averaged prediction distributions of several models."""
    if len(models) < 2:
        raise ConfigError("ensemble needs at least two models")
    shapes = {(m.cfg.feature_channels, m.cfg.num_classes) for m in models}
    if len(shapes) != 1:
        raise ConfigError(f"models disagree on (channels, classes): {sorted(shapes)}")
    if models[0].cfg.num_classes != dataset.num_classes:
        raise ConfigError("dataset class count differs from the models'")
    dists = [model_distribution(m, dataset, batch_size, policy) for m in models]
    return ensemble_accuracy(dists, dataset.labels)


def ensemble_accuracy(distributions, labels):
    """Argmax accuracy of the mean of per-model N×K class distributions."""
    mean = np.mean(distributions, axis=0)
    return float((mean.argmax(axis=1) == np.asarray(labels)).mean())


def format_report(rec, title=None):
    """Plain-text table: one row per output, then one row per ensemble rule."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'output':<14}{'active units':>14}{'sequence':>10}{'mean conf':>12}{'top-1':>10}")
    for row in rec.per_head:
        units = "-" if row["mean_active_units"] is None else f"{row['mean_active_units']:.1f}"
        seq = "-" if row["sequence"] is None else str(row["sequence"])
        lines.append(
            f"{'Out' + str(row['head_id']):<14}{units:>14}{seq:>10}"
            f"{100 * row['mean_confidence']:>11.2f}%{100 * row['top1']:>9.2f}%"
        )
    for rule, acc in rec.ensemble.items():
        name = {"vote": "VOTE", "avg-softmax": "AVG", "avg-logits": "AVG-LOGITS"}.get(rule, rule)
        lines.append(f"{name:<14}{'-':>14}{'-':>10}{'-':>12}{100 * acc:>9.2f}%")
    return "\n".join(lines)
