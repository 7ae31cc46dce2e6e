"""Dense numeric kernels: convolution, pooling, dense, activations, softmax.

Tensors are plain ``numpy.ndarray`` objects. Image-like kernels accept a
single sample ``(C, H, W)`` or a stack ``(N, C, H, W)``; vector kernels
accept ``(D,)`` or ``(N, D)``. The output keeps the input's rank.

Storage is float32. All dot products accumulate in float64 and the result is
rounded back to the inputs' common dtype, so a float64 network (used for
gradient checks) stays float64 end to end.

Every product is computed with a fixed per-sample shape: convolutions use a
stacked matmul (one GEMM per sample) and dense layers use fixed blocks of
``DENSE_BLOCK`` rows. A sample's result therefore never depends on how many
other samples share the call, which keeps Monte-Carlo batches bit-identical
to single-image forwards.
"""

from __future__ import annotations

import numpy as np

ACC = np.float64
DENSE_BLOCK = 16


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MissingCacheError(ValueError):
    """A backward kernel was called without the forward values it needs."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def _batched(x: np.ndarray, rank: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"{name}: expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _require(value, name: str) -> None:
    if value is None:
        raise MissingCacheError(f"missing forward cache: {name}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, H'*W') in float64."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=ACC)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, padding:padding + h, padding:padding + w]


def _check_conv(xb: np.ndarray, kernels: np.ndarray, stride: int, padding: int) -> None:
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, kH, kW), got {kernels.shape}")
    if xb.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"conv2d: input has {xb.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
    if kernels.shape[2] > hp or kernels.shape[3] > wp:
        raise ShapeError(f"conv2d: kernel {kernels.shape[2:]} larger than padded input {(hp, wp)}")


def conv2d_forward(x, kernels, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding plus a per-channel bias."""
    xb, single = _batched(x, 3, "conv2d input")
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    _check_conv(xb, kernels, stride, padding)
    c_out, _, kh, kw = kernels.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")
    dtype = np.result_type(xb, kernels, bias)
    n, _, h, w = xb.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = _im2col(xb, kh, kw, stride, padding)
    out = kernels.reshape(c_out, -1).astype(ACC) @ cols
    out += bias.astype(ACC)[:, None]
    out = out.reshape(n, c_out, ho, wo).astype(dtype)
    _check_finite(out, "conv2d output")
    return out[0] if single else out


def conv2d_input_grad(grad_out, kernels, input_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of the convolution with respect to its input (transposed conv).

    ``input_shape`` is the forward input's shape, single or batched.
    """
    gb, single = _batched(grad_out, 3, "conv2d grad")
    kernels = np.asarray(kernels)
    c_out, c_in, kh, kw = kernels.shape
    shape = tuple(input_shape) if len(input_shape) == 4 else (gb.shape[0], *input_shape)
    g = gb.reshape(gb.shape[0], c_out, -1).astype(ACC)
    dcols = kernels.reshape(c_out, -1).astype(ACC).T @ g
    dx = _col2im(dcols, shape, kh, kw, stride, padding)
    dx = dx.astype(np.result_type(gb, kernels))
    return dx[0] if single else dx


def conv2d_backward(grad_out, x, kernels, stride: int = 1, padding: int = 0):
    """Gradients ``(d_input, d_kernels, d_bias)`` of a convolution."""
    _require(x, "conv2d input")
    _require(kernels, "conv2d kernels")
    xb, single = _batched(x, 3, "conv2d input")
    gb, _ = _batched(grad_out, 3, "conv2d grad")
    kernels = np.asarray(kernels)
    _check_conv(xb, kernels, stride, padding)
    c_out, _, kh, kw = kernels.shape
    dtype = np.result_type(xb, kernels)
    n = xb.shape[0]
    g = gb.reshape(n, c_out, -1).astype(ACC)
    cols = _im2col(xb, kh, kw, stride, padding)
    g2 = g.transpose(1, 0, 2).reshape(c_out, -1)
    dk = g2 @ cols.transpose(0, 2, 1).reshape(-1, cols.shape[1])
    db = g2.sum(axis=1)
    dx = _col2im(kernels.reshape(c_out, -1).astype(ACC).T @ g, xb.shape, kh, kw, stride, padding)
    dx = dx.astype(dtype)
    return (dx[0] if single else dx), dk.reshape(kernels.shape).astype(dtype), db.astype(dtype)


def maxpool2d(x, window: int):
    """Non-overlapping max pooling.

    Returns the pooled tensor and, for each output, the flat index
    ``row * W + col`` of the winning input inside its channel plane. Ties go
    to the lowest flat index.
    """
    xb, single = _batched(x, 3, "maxpool input")
    n, c, h, w = xb.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"maxpool: {h}x{w} not divisible by window {window}")
    hs, ws = h // window, w // window
    v = xb.reshape(n, c, hs, window, ws, window).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(n, c, hs, ws, window * window)
    k = v.argmax(axis=-1)
    out = np.take_along_axis(v, k[..., None], axis=-1)[..., 0]
    rows = np.arange(hs)[:, None] * window + k // window
    cols = np.arange(ws)[None, :] * window + k % window
    idx = rows * w + cols
    return (out[0], idx[0]) if single else (out, idx)


def maxpool_backward(grad_out, argmax, input_shape) -> np.ndarray:
    """Route each upstream gradient to the position recorded by ``maxpool2d``."""
    _require(argmax, "maxpool argmax")
    gb, single = _batched(grad_out, 3, "maxpool grad")
    ib, _ = _batched(argmax, 3, "maxpool argmax")
    shape = tuple(input_shape) if len(input_shape) == 4 else (gb.shape[0], *input_shape)
    n, c, h, w = shape
    dx = np.zeros((n, c, h * w), dtype=gb.dtype)
    np.put_along_axis(dx, ib.reshape(n, c, -1), gb.reshape(n, c, -1), axis=-1)
    dx = dx.reshape(n, c, h, w)
    return dx[0] if single else dx


def dense_forward(x, weights, bias) -> np.ndarray:
    """``out[j] = sum_i weights[j, i] * x[i] + bias[j]``."""
    xb, single = _batched(x, 1, "dense input")
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or weights.shape[1] != xb.shape[1]:
        raise ShapeError(f"dense: weights {weights.shape} do not accept input of size {xb.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias must have shape ({weights.shape[0]},), got {bias.shape}")
    dtype = np.result_type(xb, weights, bias)
    wt = weights.astype(ACC).T
    n = xb.shape[0]
    out = np.empty((n, weights.shape[0]), dtype=ACC)
    block = np.zeros((DENSE_BLOCK, xb.shape[1]), dtype=ACC)
    for s in range(0, n, DENSE_BLOCK):
        k = min(DENSE_BLOCK, n - s)
        block[:k] = xb[s:s + k]
        block[k:] = 0.0
        out[s:s + k] = (block @ wt)[:k]
    out += bias.astype(ACC)
    out = out.astype(dtype)
    _check_finite(out, "dense output")
    return out[0] if single else out


def dense_backward(grad_out, x, weights):
    """Gradients ``(d_input, d_weights, d_bias)`` of a dense layer."""
    _require(x, "dense input")
    _require(weights, "dense weights")
    xb, single = _batched(x, 1, "dense input")
    gb, _ = _batched(grad_out, 1, "dense grad")
    weights = np.asarray(weights)
    dtype = np.result_type(xb, weights)
    g = gb.astype(ACC)
    dx = (g @ weights.astype(ACC)).astype(dtype)
    dw = (g.T @ xb.astype(ACC)).astype(dtype)
    db = g.sum(axis=0).astype(dtype)
    return (dx[0] if single else dx), dw, db


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return _check_finite(np.maximum(x, 0).astype(x.dtype), "relu output")


def relu_backward(grad_out, x) -> np.ndarray:
    _require(x, "relu input")
    return np.where(np.asarray(x) > 0, grad_out, 0).astype(np.asarray(grad_out).dtype)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction."""
    z = np.asarray(logits, dtype=ACC)
    _check_finite(z, "softmax input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels) -> np.ndarray:
    """Per-sample negative log-likelihood of ``labels`` under ``probs``."""
    p = np.asarray(probs, dtype=ACC)
    labels = np.asarray(labels)
    picked = np.take_along_axis(np.atleast_2d(p), np.atleast_1d(labels)[:, None], axis=-1)[:, 0]
    loss = -np.log(np.maximum(picked, np.finfo(ACC).tiny))
    return loss if p.ndim == 2 else loss[0]


def softmax_cross_entropy_grad(probs, labels) -> np.ndarray:
    """Gradient of cross-entropy w.r.t. the logits: ``probs - one_hot(labels)``."""
    _require(probs, "softmax probabilities")
    p = np.array(probs, dtype=ACC)
    pb = np.atleast_2d(p)
    lb = np.atleast_1d(np.asarray(labels))
    if lb.shape[0] != pb.shape[0] or (lb < 0).any() or (lb >= pb.shape[1]).any():
        raise ShapeError(f"labels {labels!r} do not fit probabilities of shape {p.shape}")
    pb[np.arange(pb.shape[0]), lb] -= 1.0
    return pb if p.ndim == 2 else pb[0]
