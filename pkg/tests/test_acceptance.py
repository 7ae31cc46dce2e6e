"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (printed in the terminal summary by
``conftest.py``) and asserts the same condition, so a red line is always a
red test.
"""

from __future__ import annotations

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from uatriage import tensor_core as tc
from uatriage.cli import main as cli_main
from uatriage.deep_taylor import relevance
from uatriage.mc_uncertainty import PredictiveSummary, mc_predict, summarize
from uatriage.network import (Conv, Dense, Dropout, Flatten, MaxPool, ModelConfig, ReLU, Softmax,
                              WeightSet, backward, build_reference_model, decode_weights,
                              encode_weights, forward, forward_batch, init_weights, load_weights,
                              save_weights)
from uatriage.synthgen import CLASS_NAMES, SynthSpec, generate_dataset
from uatriage.trainer import TrainConfig, evaluate, train
from uatriage.triage import (ThresholdTable, calibrate_thresholds, evaluate_with_referral,
                             removal_curve)

from oracles import (central_difference, direct_moving_average, grad_close, kink_margin,
                     suffix_accuracies)

RESULTS: list[str] = []


def record(label: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# -- 1 -----------------------------------------------------------------------

def test_01_gradient_integrity():
    cfg = ModelConfig((1, 8, 8), (Conv(3, 3, 1, 1), ReLU(), MaxPool(2), Conv(4, 3, 1, 1), ReLU(),
                                  Flatten(), Dense(5), Softmax()), tuple("abcde"))
    x = np.random.default_rng(0).random((3, 1, 8, 8))
    labels = np.array([0, 3, 4])
    with Timer() as t:
        # non-zero biases so bias gradients are exercised; among 100 draws keep the one whose
        # activations sit furthest from a ReLU kink or pooling tie, so the h-stencil stays smooth
        def draw(seed):
            base = init_weights(cfg, seed, dtype=np.float64)
            return WeightSet(tuple((k, np.random.default_rng([seed, i]).normal(0, 0.1, b.shape))
                                   for i, (k, b) in enumerate(base.bundles)))

        margins = [kink_margin(cfg, forward_batch(cfg, draw(s), x).caches) for s in range(100)]
        w = draw(int(np.argmax(margins)))
        assert max(margins) > 2e-3, "no smooth fixture found"
        res = forward_batch(cfg, w, x)
        grads = [g for pair in backward(cfg, w, res.caches, tc.softmax_cross_entropy_grad(res.probs, labels))
                 for g in pair]
        params = [a.copy() for a in w.arrays()]

        def loss():
            ws = WeightSet(tuple(zip(params[0::2], params[1::2])))
            return float(tc.cross_entropy(forward_batch(cfg, ws, x).probs, labels).sum())

        numeric = central_difference(loss, params, h=1e-3)
        ok = [bool(grad_close(a, n, rel=1e-3, abs_tol=1e-6)) for a, n in zip(grads, numeric)]
    n_params = sum(a.size for a in params)
    record("1 gradient integrity", all(ok) and t.seconds < 30,
           f"{n_params} parameters in {len(params)} tensors, {sum(ok)}/{len(ok)} within tolerance, {t.seconds:.1f}s")


# -- 2 -----------------------------------------------------------------------

def test_02_dropout_off_equivalence():
    cfg = build_reference_model((1, 32, 32), CLASS_NAMES).with_dropout(0.0)
    w = init_weights(cfg, 2)
    rng = np.random.default_rng(2)
    mismatched = 0
    with Timer() as t:
        for i in range(100):
            x = rng.random((1, 32, 32)).astype(np.float32)
            det = forward(cfg, w, x).probs
            rows = mc_predict(cfg, w, x, passes=5, base_seed=i).probs
            mismatched += int(not all(np.array_equal(row, det) for row in rows))
    record("2 dropout-off equivalence", mismatched == 0 and t.seconds < 10,
           f"{100 - mismatched}/100 images bit-identical over 5 passes each, {t.seconds:.1f}s")


# -- 3 -----------------------------------------------------------------------

def test_03_mc_convergence():
    cfg = build_reference_model((1, 16, 16), CLASS_NAMES)
    w = init_weights(cfg, 3)
    rng = np.random.default_rng(3)
    seeds, images = 20, 8
    var100, var400 = [], []
    with Timer() as t:
        for m in range(images):
            x = rng.random((1, 16, 16)).astype(np.float32)
            # disjoint pass-seed ranges: per image, per seed, and between the two run lengths
            short = [mc_predict(cfg, w, x, 100, (m << 40) | (k << 20) | (1 << 19)).probs.mean(0)
                     for k in range(seeds)]
            long = [mc_predict(cfg, w, x, 400, (m << 40) | (k << 20)).probs.mean(0) for k in range(seeds)]
            var100.append(np.var(short, axis=0, ddof=1))
            var400.append(np.var(long, axis=0, ddof=1))
    ratio = math.sqrt(np.mean(var100) / np.mean(var400))
    record("3 MC convergence", 1.6 <= ratio <= 2.4 and t.seconds < 120,
           f"std(T=100)/std(T=400) = {ratio:.3f} (20 seeds, pooled over {images} images x 5 classes), {t.seconds:.1f}s")


# -- 4 -----------------------------------------------------------------------

def _random_network(rng, index):
    size = int(rng.choice([8, 12, 16]))
    layers = []
    for _ in range(int(rng.integers(1, 3))):
        layers += [Conv(int(rng.integers(2, 6)), 3, 1, 1), ReLU()]
        if rng.random() < 0.5 and size % 2 == 0:
            layers.append(MaxPool(2))
            size //= 2
    if rng.random() < 0.5:
        layers += [Flatten(), Dense(int(rng.integers(4, 10))), ReLU(), Dense(3), Softmax()]
    else:
        layers += [Flatten(), Dense(3), Softmax()]
    in_size = int(size * (2 ** sum(isinstance(l, MaxPool) for l in layers)))
    cfg = ModelConfig((1, in_size, in_size), tuple(layers), ("a", "b", "c"))
    w = init_weights(cfg, 1000 + index)
    return cfg, WeightSet(tuple((k, np.zeros_like(b)) for k, b in w.bundles))


def _receptive_rows(layers, row, col):
    """Input-pixel rectangle feeding one spatial unit, walked back through conv/pool layers."""
    r0, r1, c0, c1 = row, row, col, col
    for layer in reversed(layers):
        if isinstance(layer, Conv):
            r0, r1, c0, c1 = r0 - 1, r1 + 1, c0 - 1, c1 + 1
        elif isinstance(layer, MaxPool):
            k = layer.window
            r0, r1, c0, c1 = r0 * k, r1 * k + k - 1, c0 * k, c1 * k + k - 1
    return r0, r1, c0, c1


def test_04_deep_taylor_conservation_and_locality():
    rng = np.random.default_rng(4)
    worst, negatives, built, local_ok = 0.0, 0, 0, 0
    with Timer() as t:
        index = 0
        while built < 50:
            cfg, w = _random_network(rng, index)
            index += 1
            x = rng.random(cfg.input_shape).astype(np.float32)
            logits = forward(cfg, w, x).logits
            if logits.max() <= 0:
                continue  # every logit negative: the map is zero by definition, draw another
            built += 1
            amap = relevance(cfg, w, x, int(np.argmax(logits)))
            err = abs(amap.relevance.sum() - amap.output_relevance) / max(amap.output_relevance, 1e-6)
            worst = max(worst, err)
            negatives += int((amap.relevance < 0).sum())

            # locality: read one conv-stack unit through a single positive dense weight
            feat = len(cfg.layers) - 1 - [type(l) for l in reversed(cfg.layers)].index(Flatten)
            c, h, wd = cfg.shapes[feat]
            unit = (int(rng.integers(c)), int(rng.integers(h)), int(rng.integers(wd)))
            head = ModelConfig(cfg.input_shape, cfg.layers[:feat] + (Flatten(), Dense(1), Softmax()), ("only",))
            dense = np.zeros((1, c * h * wd), np.float32)
            dense[0, np.ravel_multi_index(unit, (c, h, wd))] = 1.0
            convs = [(np.abs(k), b) for (k, b), spec in zip(w.bundles, [l for l in cfg.layers if isinstance(l, (Conv, Dense))])
                     if isinstance(spec, Conv)]
            hw = WeightSet(tuple(convs) + ((dense, np.zeros(1, np.float32)),))
            local = relevance(head, hw, x, 0)
            r0, r1, c0, c1 = _receptive_rows(cfg.layers[:feat], unit[1], unit[2])
            mask = np.zeros(cfg.input_shape[1:], bool)
            mask[max(r0, 0):r1 + 1, max(c0, 0):c1 + 1] = True
            if (local.relevance[0][~mask] == 0).all() and local.relevance[0][mask].sum() > 0:
                local_ok += 1
    ok = worst <= 1e-4 and negatives == 0 and local_ok == 50 and t.seconds < 60
    record("4 Deep Taylor conservation", ok,
           f"50 networks, worst relative gap {worst:.2e}, {negatives} negative pixels, "
           f"locality {local_ok}/50, {t.seconds:.1f}s")


# -- 5 -----------------------------------------------------------------------

def _summary(confidence):
    med = np.array([confidence])
    return PredictiveSummary(med, med, med, 0, confidence)


def test_05_calibration_semantics():
    rng = np.random.default_rng(5)
    failures = 0
    with Timer() as t:
        for n in range(7, 501):
            confs = rng.random(n).round(int(rng.integers(1, 4))).tolist()  # rounding forces ties
            (threshold,) = calibrate_thresholds([_summary(c) for c in confs], [0] * n, ("x",)).thresholds
            oracle = sorted(confs)[max(math.ceil(Fraction(10, 100) * n) - 1, 0)]
            below = sum(c < threshold for c in confs)
            failures += int(threshold != oracle or below >= math.ceil(Fraction(10, 100) * n))
    record("5 calibration semantics", failures == 0 and t.seconds < 5,
           f"494 sets (N=7..500), {failures} disagreements with the sort oracle, {t.seconds:.1f}s")


# -- 6 -----------------------------------------------------------------------

EXPERIMENT_SIZE = 32


@pytest.fixture(scope="module")
def experiment():
    start = time.perf_counter()
    spec = SynthSpec(image_size=EXPERIMENT_SIZE, class_counts=(20, 25, 40, 50, 90), noise_sigma=0.05,
                     ambiguous_fraction=0.2, seed=0)
    ds = generate_dataset(spec)
    cfg = build_reference_model((1, EXPERIMENT_SIZE, EXPERIMENT_SIZE), CLASS_NAMES)
    weights, _ = train(cfg, ds.train, TrainConfig(epochs=45, seed=0))
    train_sums = [summarize(mc_predict(cfg, weights, im, 1000, 0)) for im in ds.train.images]
    test_sums = [summarize(mc_predict(cfg, weights, im, 1000, 0)) for im in ds.test.images]
    table = calibrate_thresholds(train_sums, ds.train.labels, CLASS_NAMES, percentile=10)
    return {
        "ds": ds, "cfg": cfg, "weights": weights, "table": table, "test": test_sums,
        "full": evaluate_with_referral(test_sums, ds.test.labels, ThresholdTable(CLASS_NAMES, (0.0,) * 5)),
        "triaged": evaluate_with_referral(test_sums, ds.test.labels, table),
        "seconds": time.perf_counter() - start,
    }


@pytest.mark.slow
def test_06a_retained_accuracy(experiment):
    full, tri = experiment["full"], experiment["triaged"]
    record("6a retained >= full accuracy", tri.accuracy >= full.accuracy,
           f"full {full.accuracy:.3f} -> retained {tri.accuracy:.3f} ({tri.retained} kept)")


@pytest.mark.slow
def test_06b_referral_fraction(experiment):
    n = len(experiment["test"])
    referred = int(experiment["triaged"].referrals.sum())
    frac = referred / n
    record("6b referral fraction in [5%, 40%]", 0.05 <= frac <= 0.40, f"{referred}/{n} = {frac:.1%}")


@pytest.mark.slow
def test_06c_errors_in_low_confidence_quartile(experiment):
    labels = experiment["ds"].test.labels
    conf = np.array([s.confidence for s in experiment["test"]])
    wrong = np.array([s.predicted_class != l for s, l in zip(experiment["test"], labels)])
    quartile = np.argsort(conf, kind="stable")[: len(conf) // 4]
    inside = int(wrong[quartile].sum())
    total = int(wrong.sum())
    record("6c errors concentrated in lowest-confidence quartile", 2 * inside >= total,
           f"{inside}/{total} misclassified samples among the {len(quartile)} least confident")


@pytest.mark.slow
def test_06d_removal_curve_rises(experiment):
    curve = removal_curve(experiment["test"], experiment["ds"].test.labels, 5)
    half = len(curve.raw) // 2
    first, last = float(np.mean(curve.raw[:half])), float(np.mean(curve.raw[half:]))
    record("6d removal curve second half >= first half", last >= first, f"{first:.3f} -> {last:.3f}")


@pytest.mark.slow
def test_06e_runtime(experiment):
    record("6 experiment runtime < 10 min", experiment["seconds"] < 600, f"{experiment['seconds']:.0f}s")


# -- 7 -----------------------------------------------------------------------

def test_07_removal_curve_oracle():
    rng = np.random.default_rng(7)
    raw_bad = smooth_bad = 0
    for _ in range(200):
        conf = rng.choice([0.2, 0.4, 0.6, 0.8, 0.95], size=20).tolist()
        preds = rng.integers(0, 3, 20)
        labels = rng.integers(0, 3, 20).tolist()
        sums = [PredictiveSummary(np.zeros(3), np.zeros(3), np.zeros(3), int(p), c) for p, c in zip(preds, conf)]
        curve = removal_curve(sums, labels, 5)
        raw_bad += int(list(curve.raw) != suffix_accuracies(conf, (preds == labels).tolist()))
        smooth_bad += int(list(curve.smoothed) != direct_moving_average(list(curve.raw), 5))
    record("7 removal-curve oracle", raw_bad == 0 and smooth_bad == 0,
           f"200 fixtures of 20 samples, raw mismatches {raw_bad}, window-5 mismatches {smooth_bad}")


# -- 8 -----------------------------------------------------------------------

def _pipeline(root: Path, monkeypatch) -> dict[str, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    common = ["--model", "m.uawt", "--passes", "6", "--seed", "9"]
    assert cli_main(["synth", "--out", "data", "--counts", "6,6,6,6,6", "--size", "16", "--seed", "8"]) == 0
    image = sorted(str(p) for p in Path("data/test").rglob("*.pgm"))[0]
    steps = [
        ["train", "--data", "data/train", "--out", "m.uawt", "--epochs", "2", "--seed", "8"],
        ["mc-predict", *common, "--image", image, "--out", "mc.csv", "--hist", "hist.csv"],
        ["explain", "--model", "m.uawt", "--image", image, "--out", "heat.pgm", "--raw", "heat.csv"],
        ["calibrate", *common, "--data", "data/train", "--group-by", "true", "--out", "thr.tsv"],
        ["triage", *common, "--data", "data/test", "--thresholds", "thr.tsv", "--out", "report"],
        ["curve", *common, "--data", "data/test", "--window", "2", "--out", "curve.csv"],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_08_round_trip_and_determinism(tmp_path, monkeypatch):
    cfg = build_reference_model((1, 32, 32), CLASS_NAMES)
    w = init_weights(cfg, 8)
    save_weights(cfg, w, tmp_path / "w.uawt")
    cfg2, w2 = load_weights(tmp_path / "w.uawt")
    round_trip = cfg2 == cfg and w2.bit_equal(w) and encode_weights(*decode_weights(encode_weights(cfg, w))) == \
        encode_weights(cfg, w)

    first = _pipeline(tmp_path / "run1", monkeypatch)
    second = _pipeline(tmp_path / "run2", monkeypatch)
    manifests = [k for k in first if k.endswith("manifest.json")]
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = round_trip and len(manifests) == 7 and not differing
    record("8 round-trip and determinism", ok,
           f"weights bit-exact {round_trip}; {len(first)} files from 7 commands, "
           f"{len(manifests)} identical manifests, {len(differing)} differing files")
