"""Raster containers (grayscale slices, instance labels, class probabilities)
and their PGM P5 on-disk form.

Conventions: 8-bit PGM (maxval 255) for images, 16-bit big-endian PGM
(maxval 65535) for label maps. Label 0 marks membrane/boundary, labels >= 1
are instances. All containers freeze their arrays after validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LabelOverflow, MalformedPgm, ShapeError, UnsupportedDepth

__all__ = [
    "GrayImage",
    "LabelMap",
    "ProbMap",
    "load_image",
    "save_image",
    "load_labels",
    "save_labels",
]

PROB_SUM_TOL = 1e-5


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"image must be 2-D and non-empty, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ShapeError(f"image dtype must be integer, got {arr.dtype}")
            if arr.min() < 0 or arr.max() > 255:
                raise ShapeError("intensities outside [0, 255]")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "pixels", _frozen(arr))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """Instance labels, non-negative int32; 0 = membrane, >= 1 = instance id."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"label map must be 2-D and non-empty, got shape {arr.shape}")
        if arr.min() < 0:
            raise ShapeError("labels must be non-negative")
        arr = arr.astype(np.int32)
        object.__setattr__(self, "labels", _frozen(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, shape (height, width, channels)."""

    probs: np.ndarray
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] < 2:
            raise ShapeError(f"prob map must be (H, W, C>=2), got shape {arr.shape}")
        if self.validate:
            if arr.min() < -PROB_SUM_TOL or arr.max() > 1 + PROB_SUM_TOL:
                raise ShapeError("probabilities outside [0, 1]")
            sums = arr.sum(axis=2)
            if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
                raise ShapeError("channel probabilities do not sum to 1")
        object.__setattr__(self, "probs", _frozen(arr))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def channels(self) -> int:
        return self.probs.shape[2]

    def channel(self, c: int) -> np.ndarray:
        return self.probs[:, :, c]


# --- PGM P5 ---------------------------------------------------------------

def _read_pgm(path: str | Path) -> tuple[int, int, int, bytes]:
    """Parse a P5 file into (width, height, maxval, payload)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise MalformedPgm(f"{path}: not a P5 PGM")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise MalformedPgm(f"{path}: truncated header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise MalformedPgm(f"{path}: unterminated comment")
            pos = nl + 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise MalformedPgm(f"{path}: unexpected byte {c!r} in header")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedPgm(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedPgm(f"{path}: non-positive dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise MalformedPgm(f"{path}: maxval {maxval} outside (0, 65535]")
    payload = data[pos:]
    nbytes = width * height * (2 if maxval > 255 else 1)
    if len(payload) != nbytes:
        raise MalformedPgm(f"{path}: expected {nbytes} payload bytes, got {len(payload)}")
    return width, height, maxval, payload


def load_image(path: str | Path) -> GrayImage:
    """Read an 8-bit P5 PGM; maxval must be 255."""
    width, height, maxval, payload = _read_pgm(path)
    if maxval != 255:
        raise UnsupportedDepth(f"{path}: image maxval must be 255, got {maxval}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(arr.copy())


def save_image(image: GrayImage, path: str | Path) -> None:
    """Write canonical 8-bit P5; save(load(f)) == f for canonically written files."""
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + image.pixels.tobytes())


def load_labels(path: str | Path) -> LabelMap:
    """Read a 16-bit big-endian P5 PGM; maxval must be 65535."""
    width, height, maxval, payload = _read_pgm(path)
    if maxval != 65535:
        raise UnsupportedDepth(f"{path}: label maxval must be 65535, got {maxval}")
    arr = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return LabelMap(arr.astype(np.int32))


def save_labels(labels: LabelMap, path: str | Path) -> None:
    """Write labels as 16-bit big-endian P5; ids above 65535 do not fit."""
    arr = labels.labels
    top = int(arr.max())
    if top > 65535:
        raise LabelOverflow(f"label {top} exceeds 65535; cannot store as 16-bit PGM")
    header = f"P5\n{labels.width} {labels.height}\n65535\n".encode()
    Path(path).write_bytes(header + arr.astype(">u2").tobytes())
