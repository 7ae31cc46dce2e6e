"""Deep Taylor relevance propagation.

Relevance starts at the target logit and flows back layer by layer. Hidden
conv/dense layers use the z+ rule (positive weights, non-negative inputs).
The layer that sees the pixels uses the box-constrained zB rule with bounds
``[0, 1]``. ReLU and dropout pass relevance through unchanged, max-pooling
sends it to the winning position, and biases never take a share, so every
layer conserves relevance up to the epsilon stabiliser.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .fileio import encode_pgm, fmt
from .network import Conv, Dense, Dropout, Flatten, MaxPool, ModelConfig, ReLU, Softmax, WeightSet, forward

EPSILON = 1e-9


@dataclass(frozen=True, eq=False)
class AttributionMap:
    relevance: np.ndarray
    target_class: int
    output_relevance: float
    negative_logit: bool = False  # top relevance was clipped to zero


def _linear(layer, w, x):
    if isinstance(layer, Conv):
        return tc.conv2d_forward(x, w, np.zeros(w.shape[0]), layer.stride, layer.padding)
    return w @ x


def _linear_t(layer, w, s, shape):
    if isinstance(layer, Conv):
        return tc.conv2d_input_grad(s, w, shape, layer.stride, layer.padding)
    return w.T @ s


def zplus_rule(layer, w, a, r, eps=EPSILON):
    """Redistribute ``r`` onto non-negative inputs ``a`` in proportion to ``a * max(w, 0)``."""
    wp = np.maximum(w, 0.0)
    z = _linear(layer, wp, a) + eps
    return a * _linear_t(layer, wp, r / z, a.shape)


def zbox_rule(layer, w, a, r, low=0.0, high=1.0, eps=EPSILON):
    """zB rule for inputs bounded by ``[low, high]``.

    Each contribution ``a*w - low*w+ - high*w-`` equals
    ``w+ * (a - low) + (-w-) * (high - a)``; both factors are clipped at zero.
    """
    wp, wn = np.maximum(w, 0.0), -np.minimum(w, 0.0)
    above = np.maximum(a - low, 0.0)
    below = np.maximum(high - a, 0.0)
    z = _linear(layer, wp, above) + _linear(layer, wn, below) + eps
    s = r / z
    return above * _linear_t(layer, wp, s, a.shape) + below * _linear_t(layer, wn, s, a.shape)


def relevance(
    config: ModelConfig,
    weights: WeightSet,
    image: np.ndarray,
    target_class: int | None = None,
    bounds: tuple[float, float] = (0.0, 1.0),
    eps: float = EPSILON,
) -> AttributionMap:
    """Heatmap of how much each pixel contributes to ``target_class``'s logit.

    ``target_class`` defaults to the deterministic prediction. A negative
    target logit yields an all-zero map with ``negative_logit`` set.
    """
    result = forward(config, weights, image)
    c = config.num_classes
    if target_class is None:
        target_class = int(np.argmax(result.probs))
    if not 0 <= target_class < c:
        raise ValueError(f"target_class {target_class} out of range for {c} classes")
    logit = float(result.logits[target_class])
    negative = logit < 0
    if negative:
        warnings.warn(f"logit of class {target_class} is negative; relevance map is zero", stacklevel=2)
    r_top = max(0.0, logit)

    bundle_of = {layer: n for n, layer in enumerate(config.param_layers)}
    first = config.param_layers[0]
    r = np.zeros(c)
    r[target_class] = r_top
    for i in range(len(config.layers) - 1, -1, -1):
        layer = config.layers[i]
        a = result.caches.inputs[i][0].astype(np.float64)
        if isinstance(layer, (Conv, Dense)):
            w = weights.bundles[bundle_of[i]][0].astype(np.float64)
            if i == first:
                r = zbox_rule(layer, w, a, r, bounds[0], bounds[1], eps)
            else:
                r = zplus_rule(layer, w, a, r, eps)
        elif isinstance(layer, MaxPool):
            r = tc.maxpool_backward(r, result.caches.argmax[i][0], a.shape)
        elif isinstance(layer, Flatten):
            r = r.reshape(a.shape)
        elif isinstance(layer, (ReLU, Dropout, Softmax)):
            pass
    return AttributionMap(r.reshape(config.input_shape), target_class, r_top, negative)


def normalize_map(amap: AttributionMap) -> np.ndarray:
    """Scale relevance into [0, 1] by its maximum; an all-zero map stays zero."""
    rel = np.asarray(amap.relevance, dtype=np.float64)
    peak = rel.max() if rel.size else 0.0
    if peak <= 0:
        return np.zeros_like(rel)
    return rel / peak


def heatmap_pgm(amap: AttributionMap) -> bytes:
    """8-bit P5 image of the normalised map (channels summed)."""
    norm = normalize_map(amap)
    plane = norm.sum(axis=0)
    if norm.shape[0] > 1:
        plane = plane / plane.max() if plane.max() > 0 else plane
    return encode_pgm(plane)


def relevance_csv(amap: AttributionMap) -> str:
    """Raw relevance, one image row per line (channels stacked top to bottom)."""
    rows = amap.relevance.reshape(-1, amap.relevance.shape[-1])
    return "".join(",".join(fmt(v) for v in row) + "\n" for row in rows)
