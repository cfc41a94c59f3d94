"""Raster and point-set data model plus file I/O.

Coordinates are (x=column, y=row) with the origin at the top-left pixel,
everywhere in the package.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

# per-mille weights: integer arithmetic keeps (v, v, v) -> v exact
LUMINANCE_PERMILLE = (299, 587, 114)
GRAY_MODES = ("luminance", "r", "g", "b")


class RasterFormatError(ValueError):
    """Image has a bit depth or color model we do not read."""


class PointsParseError(ValueError):
    """Malformed row in a point CSV."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PointsValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable 2D intensity field, values in [0, 255], float64.

    ``spacing_h`` is the grid unit used by the diffusion scheme.  The
    physical pixel size, when known, rides along as ``um_per_px``.
    """

    data: np.ndarray
    spacing_h: float = 1.0
    um_per_px: float | None = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"raster data must be a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise ValueError(
                f"raster values must lie in [0, 255], got [{arr.min()}, {arr.max()}]"
            )
        if not self.spacing_h > 0:
            raise ValueError(f"spacing_h must be positive, got {self.spacing_h}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _trusted(cls, arr: np.ndarray, spacing_h: float = 1.0, um_per_px: float | None = None):
        # Skip validation and copying for arrays produced inside the package.
        obj = object.__new__(cls)
        arr.flags.writeable = False
        object.__setattr__(obj, "data", arr)
        object.__setattr__(obj, "spacing_h", spacing_h)
        object.__setattr__(obj, "um_per_px", um_per_px)
        return obj

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, arr: np.ndarray) -> "Raster":
        return Raster(arr, spacing_h=self.spacing_h, um_per_px=self.um_per_px)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.spacing_h == other.spacing_h
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


@dataclass(frozen=True)
class PointSet:
    """Ordered collection of distinct integer pixel coordinates."""

    points: tuple[tuple[int, int], ...] = ()
    source_label: str = ""
    _index: frozenset = field(default=frozenset(), init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple((int(x), int(y)) for x, y in self.points)
        seen = set()
        for p in pts:
            if p in seen:
                raise PointsValidationError(f"duplicate coordinate {p}")
            seen.add(p)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_index", frozenset(seen))

    @classmethod
    def from_array(cls, arr, source_label: str = "") -> "PointSet":
        arr = np.asarray(arr).reshape(-1, 2)
        return cls(tuple(map(tuple, arr.tolist())), source_label)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __contains__(self, p) -> bool:
        return tuple(p) in self._index

    def as_array(self) -> np.ndarray:
        """(n, 2) int64 array of (x, y) rows."""
        if not self.points:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(self.points, dtype=np.int64)

    def check_bounds(self, width: int, height: int) -> None:
        for x, y in self.points:
            if not (0 <= x < width and 0 <= y < height):
                raise PointsValidationError(
                    f"point ({x}, {y}) outside raster bounds {width}x{height}"
                )


def to_gray(rgb: np.ndarray, mode: str = "luminance") -> np.ndarray:
    """Collapse an (H, W, 3) array to one channel."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if mode == "luminance":
        r, g, b = LUMINANCE_PERMILLE
        return (r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]) / 1000.0
    try:
        channel = "rgb".index(mode)
    except ValueError:
        raise ValueError(f"unknown gray mode {mode!r}, expected one of {GRAY_MODES}") from None
    return rgb[..., channel].copy()


def load_raster(
    path,
    gray_mode: str = "luminance",
    spacing_h: float = 1.0,
    um_per_px: float | None = None,
) -> Raster:
    """Read an 8/16-bit grayscale or 8-bit RGB PNG/TIFF.

    16-bit images are rescaled linearly so that 65535 maps to 255.
    Unreadable files raise ``OSError``; other color models raise
    ``RasterFormatError``.
    """
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        elif mode in ("I;16", "I;16B", "I;16L", "I;16N"):
            arr = np.asarray(im).astype(np.float64) * (255.0 / 65535.0)
        elif mode == "I":
            raw = np.asarray(im)
            if raw.size and (raw.min() < 0 or raw.max() > 65535):
                raise RasterFormatError("32-bit integer images are not supported")
            arr = raw.astype(np.float64) * (255.0 / 65535.0)
        elif mode == "RGB":
            arr = to_gray(np.asarray(im), gray_mode)
        else:
            raise RasterFormatError(f"unsupported image mode {mode!r} in {path}")
    return Raster(arr, spacing_h=spacing_h, um_per_px=um_per_px)


def quantize(data: np.ndarray) -> np.ndarray:
    """Round half-up to uint8."""
    return np.floor(np.asarray(data, dtype=np.float64) + 0.5).clip(0, 255).astype(np.uint8)


def save_raster(r: Raster, path) -> None:
    """Write an 8-bit grayscale PNG or TIFF (format from the suffix)."""
    Image.fromarray(quantize(r.data)).save(path)


def downsample2(r: Raster) -> Raster:
    """2x2 box-average downsampling; a trailing odd row/column is dropped.

    The result is again on a unit grid, so the iteration count should be
    cut to a quarter (:func:`neundiff.diffusion.iters_for_resolution`).
    """
    h, w = (r.height // 2) * 2, (r.width // 2) * 2
    if h == 0 or w == 0:
        raise ValueError("raster too small to downsample")
    d = r.data[:h, :w]
    out = 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])
    um = None if r.um_per_px is None else 2 * r.um_per_px
    return Raster(out, spacing_h=r.spacing_h, um_per_px=um)


def _parse_points(lines: Iterable[str], label: str) -> PointSet:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise PointsParseError("missing header 'x,y'", line=1) from None
    if [h.strip() for h in header] != ["x", "y"]:
        raise PointsParseError(f"expected header 'x,y', got {','.join(header)!r}", line=1)
    pts = []
    seen = {}
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise PointsParseError(f"expected 2 fields, got {len(row)}", line=lineno)
        try:
            p = (int(row[0]), int(row[1]))
        except ValueError:
            raise PointsParseError(f"non-integer field in {','.join(row)!r}", line=lineno) from None
        if p in seen:
            raise PointsValidationError(
                f"line {lineno}: duplicate coordinate {p} (first on line {seen[p]})"
            )
        seen[p] = lineno
        pts.append(p)
    return PointSet(tuple(pts), label)


def load_points(path, source_label: str | None = None) -> PointSet:
    """Read a ``x,y`` CSV of integer pixel coordinates, in file order."""
    path = Path(path)
    label = path.stem if source_label is None else source_label
    with open(path, newline="") as fh:
        return _parse_points(fh, label)


def points_to_csv(ps: PointSet | Sequence[tuple[int, int]]) -> str:
    buf = io.StringIO()
    buf.write("x,y\n")
    for x, y in ps:
        buf.write(f"{x},{y}\n")
    return buf.getvalue()


def save_points(ps: PointSet, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(points_to_csv(ps))
