"""Procedural five-class grayscale images with an ambiguity knob.

Every image has a horizontal bright band. Four classes add a motif on or
around it: bumps above the band, a dark blob with a bright rim, scattered
speckles, or a gap cut through the band. The fifth class is the band alone.
An ambiguous image is a 50/50 blend of its own motif with another class's,
keeping its original label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import encode_pgm, staged_directory
from .seeding import keyed_generator, stream
from .trainer import LabeledDataset

CLASS_NAMES = ("bumps", "blob", "speckle", "gap", "smooth")
TEST_FRACTION = 0.2
BAND_LEVEL = 0.8
_IMAGE_STREAM = 0x5E4


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    class_counts: tuple[int, ...] = (20, 25, 40, 50, 90)
    noise_sigma: float = 0.05
    ambiguous_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.class_counts) != len(CLASS_NAMES) or min(self.class_counts) < 0:
            raise ValueError(f"class_counts needs {len(CLASS_NAMES)} non-negative ints")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.ambiguous_fraction <= 1:
            raise ValueError("ambiguous_fraction must be in [0, 1]")


@dataclass
class SynthDataset:
    train: LabeledDataset
    test: LabeledDataset
    train_ambiguous: list[bool] = field(default_factory=list)
    test_ambiguous: list[bool] = field(default_factory=list)


def _band(size: int, rng: np.random.Generator) -> tuple[np.ndarray, float, float]:
    """Raised-cosine band; rows farther than ``half`` from ``centre`` are exactly 0."""
    centre = rng.uniform(0.5, 0.65) * size
    half = rng.uniform(0.06, 0.09) * size
    rows = np.arange(size, dtype=np.float64)
    d = np.abs(rows - centre)
    profile = np.where(d < half, 0.5 * (1.0 + np.cos(np.pi * d / half)), 0.0)
    img = np.repeat((BAND_LEVEL * profile)[:, None], size, axis=1)
    return img, centre, half


def _motif(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    img, centre, half = _band(size, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    top = centre - half
    if class_id == 0:  # bumps riding on top of the band
        for _ in range(int(rng.integers(2, 5))):
            bx = rng.uniform(0.15, 0.85) * size
            sx, sy = rng.uniform(0.03, 0.05) * size, rng.uniform(0.04, 0.06) * size
            by = top - sy
            img = np.maximum(img, 0.9 * np.exp(-((xx - bx) ** 2 / (2 * sx ** 2) + (yy - by) ** 2 / (2 * sy ** 2))))
    elif class_id == 1:  # dark blob with a bright rim above the band centre
        cx = (0.5 + rng.uniform(-0.1, 0.1)) * size
        rx, ry = rng.uniform(0.12, 0.18) * size, rng.uniform(0.07, 0.1) * size
        cy = top - 0.3 * ry
        rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        img = np.where(rho < 1.0, 0.0, img)
        rim = np.abs(rho - 1.0) * min(rx, ry) < 1.0
        img = np.where(rim, 0.85, img)
    elif class_id == 2:  # speckles scattered above the band
        for _ in range(int(rng.integers(15, 26))):
            px = int(rng.integers(0, size - 1))
            py = int(rng.integers(int(0.15 * size), max(int(top) - 1, int(0.15 * size) + 1)))
            img[py:py + 2, px:px + 2] = rng.uniform(0.6, 1.0)
    elif class_id == 3:  # gap through the band
        gx = (0.5 + rng.uniform(-0.1, 0.1)) * size
        gw = rng.uniform(0.06, 0.1) * size
        img = np.where(np.abs(xx - gx) < gw, 0.0, img)
    elif class_id != 4:
        raise ValueError(f"class_id must be in 0..{len(CLASS_NAMES) - 1}, got {class_id}")
    return img


def generate(class_id: int, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One ``(1, S, S)`` float32 image of ``class_id`` and its ambiguity flag."""
    if not 0 <= class_id < len(CLASS_NAMES):
        raise ValueError(f"class_id must be in 0..{len(CLASS_NAMES) - 1}, got {class_id}")
    ambiguous = bool(rng.random() < spec.ambiguous_fraction)
    other = int(rng.integers(0, len(CLASS_NAMES) - 1))
    other += other >= class_id
    img = _motif(class_id, spec.image_size, rng)
    if ambiguous:
        img = 0.5 * img + 0.5 * _motif(other, spec.image_size, rng)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], ambiguous


def image_rng(spec: SynthSpec, index: int) -> np.random.Generator:
    return keyed_generator(spec.seed ^ index, _IMAGE_STREAM)


def generate_dataset(spec: SynthSpec) -> SynthDataset:
    """Generate every image and split each class 80:20 into train and test."""
    if min(spec.class_counts) < 5:
        raise ValueError(f"each class needs at least 5 images, got {spec.class_counts}")
    images, labels, flags, names = [], [], [], []
    index = 0
    for class_id, count in enumerate(spec.class_counts):
        for k in range(count):
            img, amb = generate(class_id, spec, image_rng(spec, index))
            images.append(img)
            labels.append(class_id)
            flags.append(amb)
            names.append(f"{CLASS_NAMES[class_id]}/{CLASS_NAMES[class_id]}_{k:04d}.pgm")
            index += 1
    labels_arr = np.asarray(labels)
    train_idx, test_idx = [], []
    for class_id in range(len(CLASS_NAMES)):
        members = np.flatnonzero(labels_arr == class_id)
        members = members[stream(spec.seed, 0x5917, class_id).permutation(len(members))]
        n_test = max(1, int(math.floor(TEST_FRACTION * len(members))))
        test_idx.extend(sorted(members[:n_test].tolist()))
        train_idx.extend(sorted(members[n_test:].tolist()))

    def pick(idx):
        return LabeledDataset([images[i] for i in idx], [labels[i] for i in idx], CLASS_NAMES,
                              [names[i] for i in idx])

    return SynthDataset(pick(train_idx), pick(test_idx),
                        [flags[i] for i in train_idx], [flags[i] for i in test_idx])


def write_dataset(ds: SynthDataset, out_dir) -> None:
    """Write ``train/<class>/*.pgm``, ``test/<class>/*.pgm`` and ``ambiguity.csv``."""
    with staged_directory(Path(out_dir)) as tmp:
        lines = ["filename,is_ambiguous"]
        for split, data, flags in (("train", ds.train, ds.train_ambiguous), ("test", ds.test, ds.test_ambiguous)):
            for name in data.class_names:
                (tmp / split / name).mkdir(parents=True, exist_ok=True)
            for img, name, amb in zip(data.images, data.names, flags):
                (tmp / split / name).write_bytes(encode_pgm(img))
                lines.append(f"{split}/{name},{int(amb)}")
        (tmp / "ambiguity.csv").write_text("\n".join(lines) + "\n")
