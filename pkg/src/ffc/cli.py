"""Command-line entry point.

    ffc train --data-dir DIR --out-dir OUT [--config FILE] [--key value ...]
    ffc eval --checkpoint CK --data-dir DIR --rule vote --rule avg-softmax
    ffc ensemble-eval --checkpoint A --checkpoint B --data-dir DIR
    ffc grad-check [--component NAME ...]
    ffc overhead --channels 2048 --classes 1000 --depth 3
    ffc stats --checkpoint CK --data-dir DIR

Settings come from built-in defaults, then an optional flat ``key = value``
config file, then command-line flags. ``train`` writes the fully resolved
config to ``OUT/config.resolved``; ``ffc --config OUT/config.resolved``
reruns it.

Exit status: 0 success, 1 usage/config error, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import AugmentPolicy, channel_stats, load_dataset
from .errors import ConfigError, FFCError
from .gradcheck import grad_check
from .head import EnsembleRule, ensemble_predict, overhead_report
from .layers import softmax
from .model import Model, ModelConfig
from .optim import TrainConfig
from .train import (
    collect_outputs,
    checkpoint_policy,
    ensemble_models,
    evaluate,
    format_report,
    model_distribution,
    train,
    write_metrics,
)

COMMANDS = ("train", "eval", "ensemble-eval", "grad-check", "overhead", "stats")
log = logging.getLogger("ffc")


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item):
    def parse(s):
        if isinstance(s, (list, tuple)):
            return [item(v) for v in s]
        return [item(v.strip()) for v in str(s).split(",") if v.strip()]
    return parse


def _opt(item):
    def parse(s):
        if s is None or str(s).strip().lower() in ("", "none"):
            return None
        return item(s)
    return parse


# key -> (parser, default, repeatable flag name or None)
KEYS = {
    "command": (str, None, None),
    "dataset": (str, "mnist", None),
    "data_dir": (_opt(str), None, None),
    "out_dir": (_opt(str), None, None),
    "widths": (_list(int), [32, 64, 128], None),
    "se_stages": (_list(int), [], None),
    "se_ratio": (int, 8, None),
    "head": (str, "ffc", None),
    "depth": (int, 3, None),
    "rules": (_list(str), ["vote", "avg-softmax"], "rule"),
    "base_lr": (float, 0.02, None),
    "momentum": (float, 0.9, None),
    "weight_decay": (float, 5e-4, None),
    "epochs": (int, 5, None),
    "batch_size": (int, 128, None),
    "schedule": (str, "cosine", None),
    "label_smoothing": (float, 0.0, None),
    "mixup_alpha": (float, 0.0, None),
    "seed": (int, 0, None),
    "lr_step": (int, 30, None),
    "lr_gamma": (float, 0.1, None),
    "freeze_backbone": (_bool, False, None),
    "init_checkpoint": (_opt(str), None, None),
    "pad_crop": (int, 0, None),
    "hflip": (_bool, False, None),
    "train_limit": (_opt(int), None, None),
    "eval_limit": (_opt(int), None, None),
    "eval_batch_size": (int, 256, None),
    "deterministic": (_bool, True, None),
    "threads": (int, 1, None),
    "checkpoints": (_list(str), [], "checkpoint"),
    "split": (str, "test", None),
    "channels": (_opt(int), None, None),
    "classes": (_opt(int), None, None),
    "components": (_list(str), [], "component"),
    "trials": (int, 10, None),
    "step": (float, 1e-5, None),
    "output": (_opt(str), None, None),
    "json": (_bool, False, None),
}
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


class CommandLineError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandLineError(message)


def read_config_file(path):
    """Parse a flat ``key = value`` document; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise CommandLineError(f"cannot read config file {path}: {e}") from None
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandLineError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise CommandLineError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def format_config(cfg):
    def show(v):
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {show(cfg[k])}\n" for k in sorted(cfg))


def build_parser():
    p = _Parser(prog="ffc", description="Sequential feature filtering classifier toolkit")
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    for key, (_, _, repeat) in KEYS.items():
        if key == "command":
            continue
        if repeat:
            p.add_argument(f"--{repeat.replace('_', '-')}", dest=key, action="append")
        else:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key)
    return p


def resolve(argv):
    """Defaults < config file < flags. Returns a dict of parsed values."""
    args = build_parser().parse_args(argv)
    raw = {k: default for k, (_, default, _) in KEYS.items()}
    if args.config:
        raw.update(read_config_file(args.config))
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    if args.command:
        raw["command"] = args.command
    cfg = {}
    for key, value in raw.items():
        parse = KEYS[key][0]
        try:
            cfg[key] = value if value is None and key in ("command",) else parse(value)
        except (TypeError, ValueError) as e:
            raise CommandLineError(f"bad value for {key}: {value!r} ({e})") from None
    if cfg["command"] not in COMMANDS:
        raise CommandLineError(f"missing or unknown command {cfg['command']!r}; expected one of {COMMANDS}")
    cfg["_verbose"] = args.verbose
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, [], ""):
            raise CommandLineError(f"missing required setting {key!r} (flag --{key.replace('_', '-')})")


def _train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})


def _policy(cfg, mean, std, train_mode):
    return AugmentPolicy(
        pad_crop=cfg["pad_crop"] if train_mode else 0,
        hflip=cfg["hflip"] if train_mode else False,
        normalize_mean=tuple(mean),
        normalize_std=tuple(std),
    )


def _load(cfg, split, limit_key):
    ds = load_dataset(cfg["dataset"], cfg["data_dir"], split)
    return ds.subset(cfg.get(limit_key))


def cmd_train(cfg, out):
    _require(cfg, "data_dir", "out_dir")
    tcfg = _train_config(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    with open(os.path.join(cfg["out_dir"], "config.resolved"), "w", encoding="utf-8") as f:
        f.write(format_config(public))
    train_set = _load(cfg, "train", "train_limit")
    eval_set = _load(cfg, "test", "eval_limit")
    mean, std = channel_stats(train_set)
    if cfg["init_checkpoint"]:
        model, _ = load_checkpoint(cfg["init_checkpoint"])
    else:
        model = Model(ModelConfig(
            in_channels=train_set.images.shape[1], num_classes=train_set.num_classes,
            widths=cfg["widths"], se_stages=cfg["se_stages"], se_ratio=cfg["se_ratio"],
            head=cfg["head"], depth=cfg["depth"], seed=cfg["seed"],
        ))
    rules = [EnsembleRule.parse(r) for r in cfg["rules"]]
    policy = _policy(cfg, mean, std, True)
    metrics_path = os.path.join(cfg["out_dir"], "metrics.jsonl")
    timing_path = os.path.join(cfg["out_dir"], "timing.jsonl")
    if os.path.exists(timing_path):
        os.remove(timing_path)
    extra = {"data": {"dataset": cfg["dataset"], "mean": mean, "std": std}}
    records = []
    for rec in train(model, train_set, eval_set, tcfg, policy, cfg["out_dir"], rules,
                     cfg["eval_batch_size"], extra):
        records.append(rec)
        write_metrics(records, metrics_path, timing=False)
        with open(timing_path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"epoch": rec.epoch, "wall_seconds": rec.wall_seconds}) + "\n")
        print(f"epoch {rec.epoch}/{tcfg.epochs} lr {rec.lr:.5f} loss {rec.train_loss:.4f} "
              f"vote {100 * (rec.vote_top1 or 0):.2f}% ({rec.wall_seconds:.0f}s)", file=out, flush=True)
    report = format_report(records[-1], f"{cfg['dataset']} {cfg['head']} d={model.cfg.depth}")
    with open(os.path.join(cfg["out_dir"], "report.txt"), "w", encoding="utf-8") as f:
        f.write(report + "\n")
    print(report, file=out)
    return 0


def cmd_eval(cfg, out):
    _require(cfg, "checkpoints", "data_dir")
    rules = [EnsembleRule.parse(r) for r in cfg["rules"]]
    ds = _load(cfg, cfg["split"], "eval_limit")
    for path in cfg["checkpoints"]:
        model, config = load_checkpoint(path)
        rec = evaluate(model, ds, rules, cfg["eval_batch_size"], checkpoint_policy(config))
        if cfg["json"]:
            print(rec.to_json(timing=False), file=out)
        else:
            print(format_report(rec, path), file=out)
    return 0


def cmd_ensemble(cfg, out):
    _require(cfg, "checkpoints", "data_dir")
    if len(cfg["checkpoints"]) < 2:
        raise CommandLineError("ensemble-eval needs at least two --checkpoint values")
    ds = _load(cfg, cfg["split"], "eval_limit")
    loaded = [load_checkpoint(p) for p in cfg["checkpoints"]]
    policy = checkpoint_policy(loaded[0][1])
    singles = []
    for path, (model, config) in zip(cfg["checkpoints"], loaded):
        dist = model_distribution(model, ds, cfg["eval_batch_size"], checkpoint_policy(config))
        acc = float((dist.argmax(axis=1) == ds.labels).mean())
        singles.append(acc)
        print(f"{path}: {100 * acc:.2f}%", file=out)
    acc = ensemble_models([m for m, _ in loaded], ds, cfg["eval_batch_size"], policy)
    print(f"ensemble of {len(loaded)}: {100 * acc:.2f}%", file=out)
    return 0


def cmd_grad_check(cfg, out):
    try:
        report = grad_check(cfg["components"] or None, cfg["trials"], cfg["step"], cfg["seed"])
    except KeyError as e:
        raise CommandLineError(str(e)) from None
    offenders = []
    for name, (err, thr, ok) in report.items():
        print(f"{name:<16} max rel err {err:.3e}  (threshold {thr:.0e})  {'ok' if ok else 'FAIL'}",
              file=out)
        if not ok:
            offenders.append(name)
    if offenders:
        print(f"gradient check failed: {', '.join(offenders)}", file=sys.stderr)
        return 2
    return 0


def cmd_overhead(cfg, out):
    _require(cfg, "channels", "classes")
    rep = overhead_report(cfg["channels"], cfg["classes"], cfg["depth"])
    if cfg["json"]:
        print(json.dumps(rep, sort_keys=True), file=out)
        return 0
    print(f"extra_params={rep['extra_params']}", file=out)
    print(f"extra_flops={rep['extra_flops']}", file=out)
    for k, v in rep["flops_breakdown"].items():
        print(f"  {k}={v}", file=out)
    print(f"convention: {rep['flop_convention']}", file=out)
    return 0


def cmd_stats(cfg, out):
    _require(cfg, "checkpoints", "data_dir")
    ds = _load(cfg, cfg["split"], "eval_limit")
    model, config = load_checkpoint(cfg["checkpoints"][0])
    outputs = collect_outputs(model, ds, cfg["eval_batch_size"], checkpoint_policy(config))
    vote = ensemble_predict(outputs, EnsembleRule.VOTE)
    preds = np.stack([lg.argmax(axis=1) for lg in outputs.logits], axis=1)
    conf = np.stack([softmax(lg).max(axis=1) for lg in outputs.logits], axis=1)
    sink = open(cfg["output"], "w", encoding="utf-8") if cfg["output"] else out
    try:
        for i in range(len(ds)):
            sink.write(json.dumps({
                "index": i,
                "label": int(ds.labels[i]),
                "active_units": outputs.active_counts[:, i].tolist(),
                "head_predictions": preds[i].tolist(),
                "head_confidence": [round(float(c), 6) for c in conf[i]],
                "vote": int(vote[i]),
            }) + "\n")
    finally:
        if sink is not out:
            sink.close()
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble-eval": cmd_ensemble,
    "grad-check": cmd_grad_check,
    "overhead": cmd_overhead,
    "stats": cmd_stats,
}


def dispatch(argv=None, out=None):
    out = out or sys.stdout
    try:
        cfg = resolve(sys.argv[1:] if argv is None else list(argv))
        logging.basicConfig(level=logging.INFO if cfg["_verbose"] else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        T.set_execution(cfg["deterministic"], cfg["threads"])
        return HANDLERS[cfg["command"]](cfg, out)
    except (CommandLineError, ConfigError) as e:
        print(f"ffc: error: {e}", file=sys.stderr)
        return 1
    except (FFCError, OSError) as e:
        print(f"ffc: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
