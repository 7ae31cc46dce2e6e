"""Minibatch SGD training with geometric augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .fileio import fmt, read_pgm
from .network import ModelConfig, WeightSet, backward, forward_batch, init_weights
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 45
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    augmentation_limit: float = 0.10
    validation_fraction: float = 0.10
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.augmentation_limit <= 1:
            raise ValueError("augmentation_limit must be in [0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class LabeledDataset:
    images: list
    labels: list[int]
    class_names: tuple[str, ...]
    names: list[str] = field(default_factory=list)  # file names when loaded from disk

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if any(not 0 <= l < len(self.class_names) for l in self.labels):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def stack(self) -> np.ndarray:
        return np.stack([np.asarray(img, dtype=np.float32) for img in self.images])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        names = [self.names[i] for i in indices] if self.names else []
        return LabeledDataset([self.images[i] for i in indices], [self.labels[i] for i in indices],
                              self.class_names, names)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,loss,train_acc,val_acc"]
        for e, (l, a, v) in enumerate(zip(self.loss, self.train_acc, self.val_acc), start=1):
            lines.append(f"{e},{fmt(l)},{fmt(a)},{'' if math.isnan(v) else fmt(v)}")
        return "\n".join(lines) + "\n"


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    shift_x: float = 0.0   # pixels, positive moves content right
    shift_y: float = 0.0   # pixels, positive moves content down
    shear: float = 0.0     # x' = x + shear * y
    zoom: float = 1.0
    flip: bool = False


def draw_augment_params(rng: np.random.Generator, limit: float, height: int, width: int) -> AugmentParams:
    u = rng.uniform(-1.0, 1.0, size=5) * limit
    flip = bool(rng.random() < 0.5)
    return AugmentParams(
        rotation_deg=float(u[0] * 90.0),
        shift_x=float(u[1] * width),
        shift_y=float(u[2] * height),
        shear=float(u[3]),
        zoom=float(1.0 + u[4]),
        flip=flip,
    )


def apply_augmentation(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Affine warp about the image centre with nearest-neighbour sampling.

    Output pixels whose source falls outside the image are 0. The horizontal
    flip is applied after the warp.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(p.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # forward map: dest = zoom * R @ Shear @ (src - c) + c + shift
    fwd = p.zoom * np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, p.shear], [0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - cx - p.shift_x
    dy = yy - cy - p.shift_y
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros_like(image)
    out[..., inside] = image[..., iy[inside], ix[inside]]
    if p.flip:
        out = out[..., ::-1].copy()
    return out


def augment(image: np.ndarray, rng: np.random.Generator, limit: float) -> np.ndarray:
    """Random rotation, shifts, shear and zoom within ``limit``, plus a coin-flip mirror."""
    if not 0 <= limit <= 1:
        raise ValueError(f"augmentation limit must be in [0, 1], got {limit}")
    h, w = np.shape(image)[-2:]
    return apply_augmentation(image, draw_augment_params(rng, limit, h, w))


# -- training ----------------------------------------------------------------

def split_validation(labels: Sequence[int], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Stratified split: ``floor(fraction * n_c)`` of each class goes to validation."""
    labels = np.asarray(labels)
    rng = stream(seed, 0x5A11)
    fit, val = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        k = int(math.floor(fraction * len(members)))
        val.extend(members[:k].tolist())
        fit.extend(members[k:].tolist())
    return sorted(fit), sorted(val)


def train(config: ModelConfig, data: LabeledDataset, tc_: TrainConfig,
          initial: WeightSet | None = None) -> tuple[WeightSet, TrainHistory]:
    """Fit ``config`` on ``data`` with SGD + momentum on cross-entropy.

    A stratified ``validation_fraction`` of each class is held out for the
    per-epoch validation accuracy. Shuffling, augmentation and dropout masks
    all come from streams keyed by ``tc_.seed``.
    """
    if len(data) == 0:
        raise TrainingError("training set is empty")
    counts = np.bincount(data.labels, minlength=config.num_classes)
    if (counts == 0).any():
        missing = [config.class_names[c] for c in np.flatnonzero(counts == 0)]
        raise TrainingError(f"no training samples for class(es): {', '.join(missing)}")
    weights = initial if initial is not None else init_weights(config, tc_.seed)
    weights.validate(config)
    params = [np.array(a, dtype=np.float32) for a in weights.arrays()]
    velocity = [np.zeros_like(a) for a in params]

    fit_idx, val_idx = split_validation(data.labels, tc_.validation_fraction, tc_.seed)
    images = data.stack()
    labels = np.asarray(data.labels)
    history = TrainHistory()
    lr, mu = tc_.learning_rate, tc_.momentum

    for epoch in range(tc_.epochs):
        order = np.asarray(fit_idx)[stream(tc_.seed, 0xE90C, epoch).permutation(len(fit_idx))]
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), tc_.batch_size)):
            idx = order[start:start + tc_.batch_size]
            batch = images[idx]
            if tc_.augment:
                batch = np.stack([
                    augment(img, stream(tc_.seed, 0xA06, epoch, int(i)), tc_.augmentation_limit)
                    for img, i in zip(batch, idx)
                ])
            current = WeightSet(tuple(zip(params[0::2], params[1::2])))
            seeds = [derive_seed(tc_.seed, 0xD409, epoch, int(i)) for i in idx]
            result = forward_batch(config, current, batch, seeds)
            losses = tc.cross_entropy(result.probs, labels[idx])
            loss = float(losses.mean())
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            total_loss += float(losses.sum())
            correct += int((result.probs.argmax(axis=1) == labels[idx]).sum())
            grad_logits = tc.softmax_cross_entropy_grad(result.probs, labels[idx]) / len(idx)
            grads = backward(config, current, result.caches, grad_logits)
            flat = [g for pair in grads for g in pair]
            for p, v, g in zip(params, velocity, flat):
                v *= mu
                v -= np.float32(lr) * g.astype(np.float32)
                p += v
        history.loss.append(total_loss / len(order))
        history.train_acc.append(correct / len(order))
        current = WeightSet(tuple(zip(params[0::2], params[1::2])))
        if val_idx:
            acc, _ = evaluate(config, current, data.subset(val_idx))
        else:
            acc = float("nan")
        history.val_acc.append(acc)
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f",
                 epoch + 1, history.loss[-1], history.train_acc[-1], acc)
    return WeightSet(tuple(zip(params[0::2], params[1::2]))), history


def predict_classes(config: ModelConfig, weights: WeightSet, images: np.ndarray) -> np.ndarray:
    preds = []
    for s in range(0, len(images), EVAL_BATCH):
        probs = forward_batch(config, weights, images[s:s + EVAL_BATCH]).probs
        preds.append(probs.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(config: ModelConfig, weights: WeightSet, data: LabeledDataset) -> tuple[float, list[int]]:
    """Deterministic accuracy and per-image argmax predictions (ties -> lowest index)."""
    if len(data) == 0:
        return float("nan"), []
    preds = predict_classes(config, weights, data.stack())
    acc = float(np.mean(preds == np.asarray(data.labels)))
    return acc, [int(p) for p in preds]


# -- datasets on disk --------------------------------------------------------

def load_image_dir(root, class_names: Sequence[str] | None = None) -> LabeledDataset:
    """Read ``root/<class_name>/*.pgm``.

    Without ``class_names`` the classes are the sorted subdirectory names.
    With them, every subdirectory must be one of the given names.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    dirs = sorted(d.name for d in root.iterdir() if d.is_dir())
    names = tuple(class_names) if class_names is not None else tuple(dirs)
    unknown = set(dirs) - set(names)
    if unknown:
        raise ValueError(f"class directories not known to the model: {', '.join(sorted(unknown))}")
    images, labels, files = [], [], []
    for label, name in enumerate(names):
        folder = root / name
        if not folder.is_dir():
            continue
        for f in sorted(folder.glob("*.pgm")):
            images.append(read_pgm(f))
            labels.append(label)
            files.append(f"{name}/{f.name}")
    return LabeledDataset(images, labels, names, files)
