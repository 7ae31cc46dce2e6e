"""Monte-Carlo dropout predictive distributions and their summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .fileio import fmt
from .network import ModelConfig, WeightSet, run_layers
from .seeding import MASK64

DEFAULT_PASSES = 1000
DEFAULT_BINS = 50
CHUNK = 32


def pass_seed(base_seed: int, t: int) -> int:
    """Dropout seed of pass ``t``: ``base_seed XOR t``."""
    return (int(base_seed) ^ int(t)) & MASK64


def nearest_rank_index(n: int, percentile: float) -> int:
    """0-based index of the nearest-rank percentile in a sorted list of ``n``."""
    if n < 1:
        raise ValueError("nearest-rank percentile of an empty set")
    if not 0 <= percentile <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    rank = math.ceil(Fraction(percentile) * n / 100)
    return max(rank - 1, 0)


@dataclass(frozen=True, eq=False)
class PredictiveSample:
    """``T x C`` softmax outputs, one row per stochastic pass."""

    probs: np.ndarray
    base_seed: int = 0

    @property
    def passes(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True, eq=False)
class PredictiveSummary:
    medians: np.ndarray
    p10: np.ndarray
    p90: np.ndarray
    predicted_class: int
    confidence: float


@dataclass(frozen=True, eq=False)
class DistributionHistogram:
    edges: np.ndarray   # (bins + 1,) uniform over [0, 1]
    counts: np.ndarray  # (C, bins)


def mc_predict(
    config: ModelConfig,
    weights: WeightSet,
    image: np.ndarray,
    passes: int = DEFAULT_PASSES,
    base_seed: int = 0,
) -> PredictiveSample:
    """Run ``passes`` dropout-active forwards of one image.

    Row ``t`` always uses dropout seed ``base_seed XOR t``, so the matrix does
    not depend on how passes are batched. Layers ahead of the first dropout
    are deterministic and evaluated once.
    """
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    weights.validate(config)
    image = np.asarray(image)
    if image.shape != config.input_shape:
        raise ValueError(f"image shape {image.shape} != model input {config.input_shape}")
    drops = config.dropout_layers
    if not drops:
        warnings.warn("model has no Dropout layer; every pass is deterministic", stacklevel=2)
    first = drops[0] if drops else len(config.layers)
    prefix = run_layers(config, weights, image[None], None, 0, first)
    rows = np.empty((passes, config.num_classes), dtype=np.float64)
    for s in range(0, passes, CHUNK):
        n = min(CHUNK, passes - s)
        seeds = [pass_seed(base_seed, t) for t in range(s, s + n)]
        batch = np.repeat(prefix, n, axis=0)
        rows[s:s + n] = run_layers(config, weights, batch, seeds, start=first)
    return PredictiveSample(rows, base_seed)


def summarize(sample: PredictiveSample) -> PredictiveSummary:
    """Lower medians and nearest-rank 10th/90th percentiles per class."""
    probs = np.asarray(sample.probs)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError(f"sample must be a non-empty T x C matrix, got shape {probs.shape}")
    t = probs.shape[0]
    ordered = np.sort(probs, axis=0)
    medians = ordered[(t - 1) // 2].copy()
    p10 = ordered[nearest_rank_index(t, 10)].copy()
    p90 = ordered[nearest_rank_index(t, 90)].copy()
    predicted = int(np.argmax(medians))
    return PredictiveSummary(medians, p10, p90, predicted, float(medians[predicted]))


def histogram(sample: PredictiveSample, bins: int = DEFAULT_BINS) -> DistributionHistogram:
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    probs = np.asarray(sample.probs)
    idx = np.minimum(np.floor(probs * bins).astype(np.int64), bins - 1)
    idx = np.maximum(idx, 0)
    counts = np.stack([np.bincount(idx[:, c], minlength=bins) for c in range(probs.shape[1])])
    return DistributionHistogram(np.linspace(0.0, 1.0, bins + 1), counts)


def sample_csv(sample: PredictiveSample, class_names) -> str:
    lines = ["pass_index,class_name,probability"]
    for t, row in enumerate(sample.probs):
        lines.extend(f"{t},{name},{fmt(p)}" for name, p in zip(class_names, row))
    return "\n".join(lines) + "\n"


def histogram_csv(hist: DistributionHistogram, class_names) -> str:
    lines = ["class_name,bin_lo,bin_hi,count"]
    for name, counts in zip(class_names, hist.counts):
        for b, count in enumerate(counts):
            lines.append(f"{name},{fmt(hist.edges[b])},{fmt(hist.edges[b + 1])},{int(count)}")
    return "\n".join(lines) + "\n"
