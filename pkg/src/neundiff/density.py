"""Cell-density maps: per-frame point counts on a square mesh."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import PointSet, PointsValidationError, Raster

DEFAULT_FRAME_SIZE = 27
DEFAULT_BLUR_SIGMA = 1.0


@dataclass(frozen=True, eq=False)
class DensityGrid:
    frame_size: int
    counts: np.ndarray  # (rows, cols) int64
    width: int
    height: int
    origin: tuple[int, int] = (0, 0)

    def frame_area_um2(self, um_per_px: float | None) -> float | None:
        if um_per_px is None:
            return None
        return (self.frame_size * um_per_px) ** 2

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.counts:
            buf.write(",".join(str(int(v)) for v in row))
            buf.write("\n")
        return buf.getvalue()


def bin_points(ps: PointSet, width: int, height: int, frame_size: int = DEFAULT_FRAME_SIZE) -> DensityGrid:
    """Count points per ``frame_size`` square; edge frames may be partial."""
    if int(frame_size) != frame_size or frame_size < 1:
        raise ValueError(f"frame_size must be an integer >= 1, got {frame_size}")
    if width < 1 or height < 1:
        raise ValueError("width and height must be positive")
    ps.check_bounds(width, height)
    rows = -(-height // frame_size)
    cols = -(-width // frame_size)
    xy = ps.as_array()
    counts = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(counts, (xy[:, 1] // frame_size, xy[:, 0] // frame_size), 1)
    return DensityGrid(int(frame_size), counts, int(width), int(height))


def render_density(g: DensityGrid, blur_sigma: float = DEFAULT_BLUR_SIGMA) -> Raster:
    """Scale counts so the busiest frame is 255, then Gaussian-blur.

    One output pixel per frame; ``blur_sigma`` is in frames and 0 disables
    blurring.  The blur reflects at the edges, so total mass is kept.
    """
    if blur_sigma < 0:
        raise ValueError("blur_sigma must be non-negative")
    counts = g.counts.astype(np.float64)
    peak = counts.max() if counts.size else 0.0
    img = counts * (255.0 / peak) if peak > 0 else counts
    if blur_sigma > 0:
        img = ndimage.gaussian_filter(img, blur_sigma, mode="reflect", truncate=4.0)
    return Raster(np.clip(img, 0.0, 255.0), spacing_h=1.0)


def load_density_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    try:
        return np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)
    except ValueError as e:
        raise PointsValidationError(f"malformed density CSV {path}: {e}") from None
