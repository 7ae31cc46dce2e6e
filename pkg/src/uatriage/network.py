"""Sequential layer graphs, dropout-aware forward passes and weight files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensor_core as tc
from .seeding import keyed_generator, stream


# -- layer specs -------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        # rates live in weight files as float32; normalise so round-trips are exact
        object.__setattr__(self, "rate", float(np.float32(self.rate)))


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Union[Conv, ReLU, MaxPool, Dropout, Flatten, Dense, Softmax]
PARAMETERIZED = (Conv, Dense)


class ConfigError(ValueError):
    """A model description is internally inconsistent."""


def _propagate(shape: tuple, layer: LayerSpec, index: int) -> tuple:
    where = f"layer {index} ({type(layer).__name__})"
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ConfigError(f"{where} needs a (C, H, W) input, got {shape}")
        if min(layer.out_channels, layer.kernel_size, layer.stride) < 1 or layer.padding < 0:
            raise ConfigError(f"{where} has invalid parameters {layer}")
        c, h, w = shape
        ho = tc.conv_output_size(h, layer.kernel_size, layer.stride, layer.padding)
        wo = tc.conv_output_size(w, layer.kernel_size, layer.stride, layer.padding)
        if ho < 1 or wo < 1:
            raise ConfigError(f"{where}: kernel larger than padded input {shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, MaxPool):
        if len(shape) != 3 or layer.window < 1 or shape[1] % layer.window or shape[2] % layer.window:
            raise ConfigError(f"{where}: input {shape} not divisible by window {layer.window}")
        return (shape[0], shape[1] // layer.window, shape[2] // layer.window)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ConfigError(f"{where} needs a flat input, got {shape}")
        if layer.units < 1:
            raise ConfigError(f"{where} needs at least one unit")
        return (layer.units,)
    if isinstance(layer, Softmax):
        if len(shape) != 1:
            raise ConfigError(f"{where} needs a flat input, got {shape}")
        return shape
    if isinstance(layer, (ReLU, Dropout)):
        return shape
    raise ConfigError(f"{where}: unknown layer kind")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    class_names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not self.class_names:
            raise ConfigError("at least one class name is required")
        softmaxes = [i for i, l in enumerate(self.layers) if isinstance(l, Softmax)]
        if softmaxes != [len(self.layers) - 1]:
            raise ConfigError("exactly one Softmax is required and it must be the last layer")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_propagate(shapes[-1], layer, i))
        object.__setattr__(self, "shapes", tuple(shapes))
        params = self.param_layers
        if not params or not isinstance(self.layers[params[-1]], Dense):
            raise ConfigError("the last parameterized layer must be Dense")
        if self.layers[params[-1]].units != len(self.class_names):
            raise ConfigError(
                f"final Dense has {self.layers[params[-1]].units} units "
                f"but there are {len(self.class_names)} classes"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def param_layers(self) -> list[int]:
        """Indices of the layers that own a weight bundle, in order."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, PARAMETERIZED)]

    @property
    def dropout_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Dropout)]

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        out = []
        for i in self.param_layers:
            layer, shape_in = self.layers[i], self.shapes[i]
            if isinstance(layer, Conv):
                k = layer.kernel_size
                out.append(((layer.out_channels, shape_in[0], k, k), (layer.out_channels,)))
            else:
                out.append(((layer.units, shape_in[0]), (layer.units,)))
        return out

    def with_dropout(self, rate: float | None = None) -> "ModelConfig":
        """Copy with every Dropout rate replaced by ``rate`` (0 disables)."""
        layers = [Dropout(rate) if isinstance(l, Dropout) else l for l in self.layers]
        return ModelConfig(self.input_shape, tuple(layers), self.class_names)


def build_reference_model(input_shape, class_names: Sequence[str]) -> ModelConfig:
    """Three conv blocks of 16, 32 and 64 filters, then a 512-unit dense head.

    Each block is two 3x3 convolutions with ReLU, a 2x2 max-pool and dropout
    0.2; the dense head uses dropout 0.3.
    """
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ConfigError(f"reference model needs height and width divisible by 8, got {h}x{w}")
    layers: list[LayerSpec] = []
    for filters in (16, 32, 64):
        layers += [Conv(filters), ReLU(), Conv(filters), ReLU(), MaxPool(2), Dropout(0.2)]
    layers += [Flatten(), Dense(512), ReLU(), Dropout(0.3), Dense(len(class_names)), Softmax()]
    return ModelConfig((c, h, w), tuple(layers), tuple(class_names))


# -- weights -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightSet:
    """One ``(kernel_or_matrix, bias)`` pair per parameterized layer."""

    bundles: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        frozen = []
        for w, b in self.bundles:
            w, b = np.array(w), np.array(b)
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append((w, b))
        object.__setattr__(self, "bundles", tuple(frozen))

    def arrays(self) -> list[np.ndarray]:
        return [a for bundle in self.bundles for a in bundle]

    def validate(self, config: ModelConfig) -> None:
        expected = config.param_shapes()
        if len(expected) != len(self.bundles):
            raise ShapeMismatchError(
                f"config has {len(expected)} parameterized layers, weights have {len(self.bundles)}"
            )
        for n, ((ws, bs), (w, b)) in enumerate(zip(expected, self.bundles)):
            if w.shape != ws or b.shape != bs:
                raise ShapeMismatchError(
                    f"bundle {n}: expected {ws}/{bs}, got {w.shape}/{b.shape}"
                )

    def astype(self, dtype) -> "WeightSet":
        return WeightSet(tuple((w.astype(dtype), b.astype(dtype)) for w, b in self.bundles))

    def bit_equal(self, other: "WeightSet") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
            for x, y in zip(a, b)
        )


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> WeightSet:
    """Glorot-uniform kernels, zero biases; layer ``i`` draws from its own stream."""
    bundles = []
    for layer_index, (ws, bs) in zip(config.param_layers, config.param_shapes()):
        if len(ws) == 4:
            receptive = ws[2] * ws[3]
            fan_in, fan_out = ws[1] * receptive, ws[0] * receptive
        else:
            fan_in, fan_out = ws[1], ws[0]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        rng = stream(seed, 0x1A17, layer_index)
        w = rng.uniform(-limit, limit, size=ws).astype(dtype)
        bundles.append((w, np.zeros(bs, dtype=dtype)))
    return WeightSet(tuple(bundles))


# -- forward / backward ------------------------------------------------------

@dataclass(frozen=True)
class Deterministic:
    """Dropout disabled."""


@dataclass(frozen=True)
class Stochastic:
    """Inverted dropout with masks keyed by ``(seed, layer_index)``."""

    seed: int


ForwardMode = Union[Deterministic, Stochastic]
DETERMINISTIC = Deterministic()


@dataclass
class Caches:
    """Per-layer values kept by a forward pass, all with a leading batch axis.

    ``inputs[i]`` is the input of layer ``i``; ``inputs[-1]`` is the network
    output (probabilities).
    """

    inputs: list[np.ndarray]
    argmax: dict[int, np.ndarray]
    masks: dict[int, np.ndarray]


@dataclass
class ForwardResult:
    probs: np.ndarray
    logits: np.ndarray
    caches: Caches


def dropout_scale(shape: tuple, rate: float, seed: int, layer_index: int) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    keep = keyed_generator(seed, layer_index).random(shape, dtype=np.float32) >= rate
    return keep.astype(np.float32) * np.float32(1.0 / (1.0 - rate))


def run_layers(
    config: ModelConfig,
    weights: WeightSet,
    x: np.ndarray,
    seeds: Sequence[int] | None = None,
    start: int = 0,
    stop: int | None = None,
    caches: Caches | None = None,
) -> np.ndarray:
    """Push a batch through ``config.layers[start:stop]``.

    ``seeds`` holds one dropout seed per sample (``None`` disables dropout).
    When ``caches`` is given, layer inputs, pooling indices and dropout
    multipliers are recorded into it.
    """
    stop = len(config.layers) if stop is None else stop
    bundle_of = {layer: n for n, layer in enumerate(config.param_layers)}
    for i in range(start, stop):
        layer = config.layers[i]
        if caches is not None:
            caches.inputs.append(x)
        if isinstance(layer, Conv):
            w, b = weights.bundles[bundle_of[i]]
            x = tc.conv2d_forward(x, w, b, layer.stride, layer.padding)
        elif isinstance(layer, Dense):
            w, b = weights.bundles[bundle_of[i]]
            x = tc.dense_forward(x, w, b)
        elif isinstance(layer, ReLU):
            x = tc.relu(x)
        elif isinstance(layer, MaxPool):
            x, idx = tc.maxpool2d(x, layer.window)
            if caches is not None:
                caches.argmax[i] = idx
        elif isinstance(layer, Dropout):
            if seeds is not None:
                scale = np.stack([dropout_scale(x.shape[1:], layer.rate, s, i) for s in seeds])
                x = (x * scale).astype(x.dtype)
                if caches is not None:
                    caches.masks[i] = scale
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Softmax):
            x = tc.softmax(x)
    if caches is not None:
        caches.inputs.append(x)
    return x


def _check_inputs(config: ModelConfig, weights: WeightSet, images: np.ndarray) -> None:
    weights.validate(config)
    if images.shape[1:] != config.input_shape:
        raise tc.ShapeError(f"image shape {images.shape[1:]} != model input {config.input_shape}")


def forward_batch(
    config: ModelConfig,
    weights: WeightSet,
    images: np.ndarray,
    seeds: Sequence[int] | None = None,
) -> ForwardResult:
    """Forward a stack of images; ``seeds`` as in :func:`run_layers`."""
    images = np.asarray(images)
    _check_inputs(config, weights, images)
    caches = Caches([], {}, {})
    probs = run_layers(config, weights, images, seeds, caches=caches)
    return ForwardResult(probs, caches.inputs[-2], caches)


def forward(config: ModelConfig, weights: WeightSet, image, mode: ForwardMode = DETERMINISTIC) -> ForwardResult:
    """Single-image forward pass.

    Returned ``probs`` and ``logits`` are 1-D; the caches keep a batch axis
    of length one.
    """
    image = np.asarray(image)
    seeds = [mode.seed] if isinstance(mode, Stochastic) else None
    result = forward_batch(config, weights, image[None], seeds)
    return ForwardResult(result.probs[0], result.logits[0], result.caches)


def backward(config: ModelConfig, weights: WeightSet, caches: Caches, grad_logits: np.ndarray):
    """Parameter gradients for a batch, given d(loss)/d(logits).

    Returns a list of ``(d_weights, d_bias)`` aligned with ``weights.bundles``;
    each is summed over the batch.
    """
    if len(caches.inputs) != len(config.layers) + 1:
        raise tc.MissingCacheError("backward needs the caches of a full forward pass")
    bundle_of = {layer: n for n, layer in enumerate(config.param_layers)}
    grads: list = [None] * len(weights.bundles)
    g = np.asarray(grad_logits)
    first = config.param_layers[0]
    for i in range(len(config.layers) - 2, first - 1, -1):
        layer, x = config.layers[i], caches.inputs[i]
        if isinstance(layer, Conv):
            w, _ = weights.bundles[bundle_of[i]]
            dx, dw, db = tc.conv2d_backward(g, x, w, layer.stride, layer.padding)
            grads[bundle_of[i]] = (dw, db)
            g = dx
        elif isinstance(layer, Dense):
            w, _ = weights.bundles[bundle_of[i]]
            dx, dw, db = tc.dense_backward(g, x, w)
            grads[bundle_of[i]] = (dw, db)
            g = dx
        elif isinstance(layer, ReLU):
            g = tc.relu_backward(g, x)
        elif isinstance(layer, MaxPool):
            g = tc.maxpool_backward(g, caches.argmax.get(i), x.shape)
        elif isinstance(layer, Dropout):
            if i in caches.masks:
                g = g * caches.masks[i]
        elif isinstance(layer, Flatten):
            g = g.reshape(x.shape)
    return grads


# -- weight files ------------------------------------------------------------

MAGIC = b"UAWT"
VERSION = 1

_TAGS = {Conv: 0, ReLU: 1, MaxPool: 2, Dropout: 3, Flatten: 4, Dense: 5, Softmax: 6}


class WeightFileError(ValueError):
    """Base class for unreadable weight files."""


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


def encode_weights(config: ModelConfig, weights: WeightSet) -> bytes:
    """Serialise a model to the ``UAWT`` v1 byte layout (little-endian).

    Layout: ``b"UAWT" 0x01``; u32 C, H, W; u32 class count and per class a
    u32 byte length plus UTF-8 name; u32 layer count and per layer a u8 tag
    followed by its u32 parameters (the dropout rate is one float32); u32
    tensor count and per tensor u32 rank, u32 dims, float32 data row-major.
    """
    weights.validate(config)
    out = bytearray(MAGIC + bytes([VERSION]))
    out += struct.pack("<3I", *config.input_shape)
    out += struct.pack("<I", len(config.class_names))
    for name in config.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", len(config.layers))
    for layer in config.layers:
        out += struct.pack("<B", _TAGS[type(layer)])
        if isinstance(layer, Conv):
            out += struct.pack("<4I", layer.out_channels, layer.kernel_size, layer.stride, layer.padding)
        elif isinstance(layer, MaxPool):
            out += struct.pack("<I", layer.window)
        elif isinstance(layer, Dropout):
            out += struct.pack("<f", layer.rate)
        elif isinstance(layer, Dense):
            out += struct.pack("<I", layer.units)
    arrays = weights.arrays()
    out += struct.pack("<I", len(arrays))
    for a in arrays:
        out += struct.pack(f"<{1 + a.ndim}I", a.ndim, *a.shape)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(data: bytes) -> tuple[ModelConfig, WeightSet]:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionMismatchError(f"weight file version {version}, supported {VERSION}")
    input_shape = r.unpack("<3I")
    (n_classes,) = r.unpack("<I")
    names = []
    for _ in range(n_classes):
        (length,) = r.unpack("<I")
        names.append(r.take(length).decode("utf-8"))
    (n_layers,) = r.unpack("<I")
    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        (tag,) = r.unpack("<B")
        if tag == 0:
            layers.append(Conv(*r.unpack("<4I")))
        elif tag == 1:
            layers.append(ReLU())
        elif tag == 2:
            layers.append(MaxPool(*r.unpack("<I")))
        elif tag == 3:
            layers.append(Dropout(*r.unpack("<f")))
        elif tag == 4:
            layers.append(Flatten())
        elif tag == 5:
            layers.append(Dense(*r.unpack("<I")))
        elif tag == 6:
            layers.append(Softmax())
        else:
            raise WeightFileError(f"unknown layer tag {tag}")
    try:
        config = ModelConfig(input_shape, tuple(layers), tuple(names))
    except ConfigError as exc:
        raise ShapeMismatchError(f"inconsistent model description: {exc}") from exc
    (n_tensors,) = r.unpack("<I")
    arrays = []
    for _ in range(n_tensors):
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        count = math.prod(dims)
        arrays.append(np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims))
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    if len(arrays) % 2:
        raise ShapeMismatchError(f"odd tensor count {len(arrays)}")
    weights = WeightSet(tuple(zip(arrays[0::2], arrays[1::2])))
    weights.validate(config)
    return config, weights


def save_weights(config: ModelConfig, weights: WeightSet, path) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(Path(path), encode_weights(config, weights))


def load_weights(path) -> tuple[ModelConfig, WeightSet]:
    return decode_weights(Path(path).read_bytes())
