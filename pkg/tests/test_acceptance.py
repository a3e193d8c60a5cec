"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The MNIST and CIFAR-10 training criteria run the ``ffc train`` command into a
cache directory (``.acceptance-cache`` or $FFC_ACCEPTANCE_CACHE). A cached run
is reused only when its resolved config and the package sources are unchanged,
so a rerun of this file reports the same real training results.
"""

import hashlib
import io
import json
import math
import os
import pathlib
import statistics
import time

import numpy as np
import pytest

import ffc
from ffc import checkpoint, gradcheck
from ffc.cli import dispatch, format_config, resolve
from ffc.data import (
    encode_cifar10,
    encode_idx_images,
    encode_idx_labels,
    load_dataset,
    parse_cifar10,
    parse_idx_images,
    parse_idx_labels,
)
from ffc.head import FfcHead, ensemble_predict, filter_step, overhead_report
from ffc.model import Model, ModelConfig
from ffc.train import checkpoint_policy, ensemble_models, model_distribution, read_metrics
from conftest import CIFAR_DIR, MNIST_DIR
from oracles import brute_force_vote, random_vote_instance

ROOT = pathlib.Path(__file__).resolve().parent.parent
CACHE = pathlib.Path(os.environ.get("FFC_ACCEPTANCE_CACHE", ROOT / ".acceptance-cache"))
RESULTS = []


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def source_digest():
    h = hashlib.sha256()
    for path in sorted(pathlib.Path(ffc.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cached_train(name, argv):
    """Run ``ffc train`` into CACHE/name unless an identical finished run exists."""
    out = CACHE / name
    argv = ["train", "--out-dir", str(out), *argv]
    expected = format_config({k: v for k, v in resolve(argv).items() if not k.startswith("_")})
    stamp = out / "source.sha256"
    done = out / "final.ffck"
    if not (done.exists() and stamp.exists() and stamp.read_text() == source_digest()
            and (out / "config.resolved").read_text() == expected):
        if done.exists():
            done.unlink()
        log = io.StringIO()
        code = dispatch(argv, log)
        assert code == 0, f"training run {name} failed:\n{log.getvalue()}"
        stamp.write_text(source_digest())
    timing = [json.loads(line) for line in (out / "timing.jsonl").read_text().splitlines()]
    return out, read_metrics(out / "metrics.jsonl"), sum(t["wall_seconds"] for t in timing)


def need(directory, probe, what):
    if not os.path.exists(os.path.join(directory, probe)):
        return f"{what} not found in {directory}"
    return None


MNIST_RUN = ["--dataset", "mnist", "--data-dir", MNIST_DIR, "--epochs", "5", "--seed", "0",
             "--deterministic", "true", "--threads", "4"]


def test_criterion_1_overhead():
    rep = overhead_report(2048, 1000, 3)
    ok = rep["extra_params"] == 12288 and 1.2e7 <= rep["extra_flops"] <= 1.6e7
    record(1, ok, f"extra_params={rep['extra_params']}, extra_flops={rep['extra_flops']}")


def test_criterion_2_gradients():
    start = time.perf_counter()
    report = gradcheck.grad_check(trials=10, step=1e-5)
    elapsed = time.perf_counter() - start
    worst = max(err for err, _, _ in report.values())
    worst_name = max(report, key=lambda n: report[n][0])
    ok = worst < 1e-6 and report["linear"][0] < 1e-7 and elapsed < 60
    record(2, ok, f"{len(report)} components, max rel err {worst:.2e} ({worst_name}), "
                  f"{elapsed:.1f}s")


def test_criterion_3_filtering():
    rng = np.random.default_rng(3)
    monotone, worst_fixed, worst_eps = True, 0.0, 0.0
    for c in (4, 64, 2048):
        x = rng.exponential(1.0, (1000, c)) * (rng.random((1000, c)) < rng.random((1000, 1)))
        out = FfcHead(c, 10, 3, rng)(x)
        monotone &= bool(np.all(np.diff(out.active_counts, axis=0) <= 0))
        j = rng.integers(0, c, 1000)
        single = np.zeros((1000, c))
        single[np.arange(1000), j] = rng.uniform(1e-3, 1e3, 1000)
        target = np.zeros((1000, c))
        target[np.arange(1000), j] = math.sqrt(c - 1)
        one = np.ones(c)
        # the normalization as written, without the numerical guard
        y = filter_step(single, one, 0 * one, eps=0.0)
        y2 = filter_step(y, one, 0 * one, eps=0.0)
        worst_fixed = max(worst_fixed, np.abs(y - target).max(), np.abs(y2 - target).max())
        # with the default guard the fixed point moves to sqrt(C-1 - eps C^2/(C-1))
        z = single
        for _ in range(6):
            z = filter_step(z, one, 0 * one)
        worst_eps = max(worst_eps, np.abs(z - target).max())
    ok = monotone and worst_fixed < 1e-5
    record(3, ok, f"monotone={monotone}, fixed-point err {worst_fixed:.1e} "
                  f"(with eps=1e-5 guard: {worst_eps:.1e})")


def test_criterion_4_vote_oracle():
    rng = np.random.default_rng(4)
    agree = 0
    for _ in range(10000):
        lg = random_vote_instance(rng)
        agree += int(ensemble_predict([row[None] for row in lg])[0] == brute_force_vote(lg))
    record(4, agree == 10000, f"{agree}/10000 instances agree")


def test_criterion_5_formats(tmp_path):
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, (17, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, 17).astype(np.uint8)
    img, lab = encode_idx_images(pixels), encode_idx_labels(labels)
    idx_ok = (encode_idx_images(parse_idx_images(img)) == img
              and encode_idx_labels(parse_idx_labels(lab)) == lab)
    cif = encode_cifar10(rng.integers(0, 256, (9, 3, 32, 32)), rng.integers(0, 10, 9))
    cifar_ok = encode_cifar10(*parse_cifar10(cif)) == cif
    missing = need(MNIST_DIR, "train-images-idx3-ubyte", "MNIST")
    if missing:
        header_ok, header = False, missing
    else:
        ds = load_dataset("mnist", MNIST_DIR, "train")
        header_ok = ds.images.shape == (60000, 1, 28, 28)
        header = f"official N={ds.images.shape[0]}, {ds.images.shape[2]}x{ds.images.shape[3]}"
    model = Model(ModelConfig())
    a, b = tmp_path / "a.ffck", tmp_path / "b.ffck"
    checkpoint.save_checkpoint(model, a)
    checkpoint.save_checkpoint(checkpoint.load_checkpoint(a)[0], b)
    ck_ok = a.read_bytes() == b.read_bytes()
    record(5, idx_ok and cifar_ok and header_ok and ck_ok,
           f"idx={idx_ok}, cifar={cifar_ok}, {header}, checkpoint identical={ck_ok}")


@pytest.mark.slow
def test_criterion_6_mnist():
    missing = need(MNIST_DIR, "train-images-idx3-ubyte", "MNIST")
    if missing:
        record(6, False, missing)
    _, ffc_recs, ffc_secs = cached_train("mnist-ffc-a", MNIST_RUN + ["--head", "ffc"])
    _, plain_recs, plain_secs = cached_train("mnist-plain", MNIST_RUN + ["--head", "plain"])
    vote, plain = ffc_recs[-1].vote_top1, plain_recs[-1].vote_top1
    ok = vote >= 0.98 and plain >= 0.975 and ffc_secs <= 1800
    record(6, ok, f"FFC vote {100 * vote:.2f}%, plain {100 * plain:.2f}% after "
                  f"{len(ffc_recs)} epochs; FFC run {ffc_secs / 60:.1f} min, plain "
                  f"{plain_secs / 60:.1f} min (deterministic mode, one BLAS thread)")


CIFAR_RUN = ["--dataset", "cifar10", "--data-dir", CIFAR_DIR, "--epochs", "20",
             "--pad-crop", "4", "--hflip", "true", "--deterministic", "true"]


def cifar_runs():
    runs = {}
    for head in ("plain", "ffc"):
        for seed in (0, 1, 2):
            out, recs, _ = cached_train(f"cifar-{head}-{seed}",
                                        CIFAR_RUN + ["--head", head, "--seed", str(seed)])
            assert (out / "report.txt").exists()
            runs[head, seed] = (out, recs[-1])
    return runs


@pytest.mark.slow
def test_criterion_7_cifar_direction():
    missing = need(CIFAR_DIR, "test_batch.bin", "CIFAR-10 binaries")
    if missing:
        record(7, False, missing)
    runs = cifar_runs()
    diffs = [runs["ffc", s][1].vote_top1 - runs["plain", s][1].vote_top1 for s in range(3)]
    med_ffc = statistics.median(runs["ffc", s][1].vote_top1 for s in range(3))
    med_plain = statistics.median(runs["plain", s][1].vote_top1 for s in range(3))
    ok = statistics.median(diffs) >= 0 and med_ffc >= 0.70 and med_plain >= 0.70
    record(7, ok, f"median FFC {100 * med_ffc:.2f}%, plain {100 * med_plain:.2f}%, "
                  f"median gain {100 * statistics.median(diffs):+.2f} pp")


@pytest.mark.slow
def test_criterion_8_cifar_ensemble():
    missing = need(CIFAR_DIR, "test_batch.bin", "CIFAR-10 binaries")
    if missing:
        record(8, False, missing)
    runs = cifar_runs()
    test_set = load_dataset("cifar10", CIFAR_DIR, "test")
    models = []
    for seed in (0, 1):
        model, config = checkpoint.load_checkpoint(runs["ffc", seed][0] / "final.ffck")
        models.append((model, config))
    policy = checkpoint_policy(models[0][1])
    singles = []
    for model, config in models:
        dist = model_distribution(model, test_set, policy=checkpoint_policy(config))
        singles.append(float((dist.argmax(axis=1) == test_set.labels).mean()))
    pair = ensemble_models([m for m, _ in models], test_set, policy=policy)
    self_pair = ensemble_models([models[0][0], models[0][0]], test_set, policy=policy)
    ok = pair >= max(singles) - 0.002 and self_pair == singles[0]
    record(8, ok, f"singles {[round(100 * s, 2) for s in singles]}%, ensemble {100 * pair:.2f}%, "
                  f"self-ensemble identical={self_pair == singles[0]}")


@pytest.mark.slow
def test_criterion_9_determinism():
    missing = need(MNIST_DIR, "train-images-idx3-ubyte", "MNIST")
    if missing:
        record(9, False, missing)
    a, _, _ = cached_train("mnist-ffc-a", MNIST_RUN + ["--head", "ffc"])
    b, _, _ = cached_train("mnist-ffc-b", MNIST_RUN + ["--head", "ffc"])
    same_log = (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    same_ckpt = (a / "final.ffck").read_bytes() == (b / "final.ffck").read_bytes()
    record(9, same_log and same_ckpt,
           f"metrics logs identical={same_log}, final checkpoints identical={same_ckpt}")
