"""Atomic file writes and 8-bit binary PGM (P5) images."""

from __future__ import annotations

import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextmanager
def staged_directory(path: Path):
    """Yield a temporary directory that becomes ``path`` on clean exit.

    ``path`` must not exist or must be empty.
    """
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise FileExistsError(f"output directory {path} exists and is not empty")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        path.rmdir()
    os.replace(tmp, path)


def encode_pgm(image: np.ndarray) -> bytes:
    """Encode a 2-D array of values in [0, 1] as P5 with maxval 255."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise PGMError(f"PGM needs a single-channel 2-D image, got shape {image.shape}")
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes into a float32 ``(1, H, W)`` array of value/255."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise PGMError("truncated PGM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMError(f"unsupported PGM magic {tokens[0]!r}, expected P5")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"bad PGM header values {tokens[1:]!r}") from exc
    if maxval != 255:
        raise PGMError(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise PGMError(f"bad PGM dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise PGMError(f"PGM raster has {len(raster)} bytes, expected {width * height}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return (pixels.astype(np.float32) / np.float32(255.0))[None]


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_pgm(image))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def fmt(value: float) -> str:
    """Six significant digits, the format of every numeric output."""
    return f"{value:.6g}"
