"""Synthetic NeuN-like rasters with known cell centres.

Each soma is a Gaussian darkening ``depth * exp(-r^2 / (2 sigma^2))`` with
``sigma = diameter / 4``, truncated at ``4 sigma``; overlapping somata
combine by taking the darker value.  Spatially correlated noise is added
inside somata, weighted by the soma profile, so that a single cell shows
several raw local minima.  Speckles are small dark blobs away from cells
that are not part of the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .raster import PointSet, Raster

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
TRUNCATE_SIGMAS = 4.0


class GenerationError(RuntimeError):
    """Cells could not be placed within the retry budget."""


@dataclass(frozen=True)
class SynthSpec:
    width: int = 512
    height: int = 512
    n_cells: int = 100
    diameter_min: float = 9.0
    diameter_max: float = 30.0
    center_min: float = 40.0
    center_max: float = 110.0
    background: float = 230.0
    touching_fraction: float = 0.2
    noise_amplitude: float = 15.0
    noise_scale: float = 1.0
    speckle_count: int = 0
    speckle_size: float = 4.0
    speckle_min: float = 40.0
    speckle_max: float = 120.0
    seed: int = 0
    max_retries: int = 2000

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be positive")
        if self.n_cells < 0 or self.speckle_count < 0:
            raise ValueError("counts must be non-negative")
        if not 3 <= self.diameter_min <= self.diameter_max:
            raise ValueError("need 3 <= diameter_min <= diameter_max")
        for name in ("center_min", "center_max", "background", "speckle_min", "speckle_max"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise ValueError(f"{name} must lie in [0, 255], got {v}")
        if not (self.center_min <= self.center_max <= self.background):
            raise ValueError("need center_min <= center_max <= background")
        if not (self.speckle_min <= self.speckle_max <= self.background):
            raise ValueError("need speckle_min <= speckle_max <= background")
        if not 0 <= self.touching_fraction <= 1:
            raise ValueError("touching_fraction must lie in [0, 1]")
        if self.noise_amplitude < 0 or self.noise_scale < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.speckle_size <= 0:
            raise ValueError("speckle_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)


def profile_fwhm(diameter: float) -> float:
    """Full width at half depth of a soma profile."""
    return FWHM_PER_SIGMA * diameter / 4.0


def darkening(shape, centers, diameters, depths) -> tuple[np.ndarray, np.ndarray]:
    """Combined soma darkening and the normalised soma weight (max of
    ``exp(-r^2/2sigma^2)`` over cells) on a grid of ``shape``."""
    H, W = shape
    dark = np.zeros((H, W))
    weight = np.zeros((H, W))
    for (cx, cy), d, depth in zip(centers, diameters, depths):
        sigma = d / 4.0
        R = int(math.ceil(TRUNCATE_SIGMAS * sigma))
        y0, y1 = max(0, int(cy) - R), min(H, int(cy) + R + 1)
        x0, x1 = max(0, int(cx) - R), min(W, int(cx) + R + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        prof = np.exp(-r2 / (2 * sigma * sigma))
        prof[r2 > (TRUNCATE_SIGMAS * sigma) ** 2] = 0.0
        np.maximum(dark[y0:y1, x0:x1], depth * prof, out=dark[y0:y1, x0:x1])
        np.maximum(weight[y0:y1, x0:x1], prof, out=weight[y0:y1, x0:x1])
    return dark, weight


def render_cells(shape, centers, diameters, center_intensities, background: float = 230.0) -> Raster:
    """Noise-free raster of the given somata on a flat background."""
    depths = [background - c for c in center_intensities]
    dark, _ = darkening(shape, centers, diameters, depths)
    return Raster(np.clip(background - dark, 0.0, 255.0))


def synthesize(
    shape,
    centers,
    diameters,
    depths,
    background: float = 230.0,
    noise_amplitude: float = 0.0,
    noise_scale: float = 1.0,
    rng=None,
    speckles=(),
    speckle_size: float = 4.0,
    speckle_depths=(),
) -> Raster:
    """Render somata (and optional speckles) with profile-weighted noise.

    ``noise_amplitude`` is the standard deviation of the correlated noise
    field at a soma centre; it fades out with the soma profile.
    """
    dark, weight = darkening(shape, centers, diameters, depths)
    if len(speckles):
        sp_dark, _ = darkening(shape, speckles, [speckle_size] * len(speckles), speckle_depths)
        np.maximum(dark, sp_dark, out=dark)
    img = background - dark
    if noise_amplitude > 0 and len(centers):
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal(shape)
        if noise_scale > 0:
            noise = ndimage.gaussian_filter(noise, noise_scale, mode="reflect")
        noise /= noise.std()
        img += noise_amplitude * noise * weight
    return Raster(np.clip(img, 0.0, 255.0))


def _place(rng, spec: SynthSpec):
    W, H = spec.width, spec.height
    n_pairs = int(round(spec.touching_fraction * spec.n_cells / 2))
    n_pairs = min(n_pairs, spec.n_cells // 2)
    n_single = spec.n_cells - 2 * n_pairs
    cells: list[tuple[int, int, float]] = []  # (x, y, diameter)

    def inside(x, y, d):
        r = d / 2
        return r <= x <= W - 1 - r and r <= y <= H - 1 - r

    def clear(x, y, d):
        # non-touching somata keep a gap of a quarter of their summed radii
        for ox, oy, od in cells:
            if math.hypot(x - ox, y - oy) < 1.25 * (d + od) / 2:
                return False
        return True

    def draw_d():
        return float(rng.uniform(spec.diameter_min, spec.diameter_max))

    def draw_xy(d):
        r = d / 2
        x = int(rng.integers(math.ceil(r), max(math.ceil(r), math.floor(W - 1 - r)) + 1))
        y = int(rng.integers(math.ceil(r), max(math.ceil(r), math.floor(H - 1 - r)) + 1))
        return x, y

    for _ in range(n_pairs):
        for _attempt in range(spec.max_retries):
            d1, d2 = draw_d(), draw_d()
            x1, y1 = draw_xy(d1)
            s = rng.uniform(0.8, 1.1) * (d1 + d2) / 2
            ang = rng.uniform(0, 2 * math.pi)
            x2 = int(round(x1 + s * math.cos(ang)))
            y2 = int(round(y1 + s * math.sin(ang)))
            if (x1, y1) == (x2, y2):
                continue
            if not (inside(x1, y1, d1) and inside(x2, y2, d2)):
                continue
            if clear(x1, y1, d1) and clear(x2, y2, d2):
                cells.append((x1, y1, d1))
                cells.append((x2, y2, d2))
                break
        else:
            raise GenerationError("could not place a touching pair; lower n_cells or enlarge raster")

    for _ in range(n_single):
        for _attempt in range(spec.max_retries):
            d = draw_d()
            x, y = draw_xy(d)
            if inside(x, y, d) and clear(x, y, d):
                cells.append((x, y, d))
                break
        else:
            raise GenerationError("could not place a cell; lower n_cells or enlarge raster")
    return cells


def _place_speckles(rng, spec: SynthSpec, cells):
    out = []
    for _ in range(spec.speckle_count):
        for _attempt in range(spec.max_retries):
            x = int(rng.integers(0, spec.width))
            y = int(rng.integers(0, spec.height))
            if all(
                math.hypot(x - cx, y - cy) >= d + 2 * spec.speckle_size for cx, cy, d in cells
            ):
                out.append((x, y))
                break
        else:
            raise GenerationError("could not place a speckle away from cells")
    return out


def generate(spec: SynthSpec) -> tuple[Raster, PointSet]:
    """Render a synthetic raster and its ground-truth centres.

    The raster is real-valued (not quantised).  Output is a pure function
    of ``spec``; random draws happen in a fixed order (cells, speckles,
    noise) so that turning noise off leaves cell placement unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    cells = _place(rng, spec)
    centers = [(x, y) for x, y, _ in cells]
    diameters = [d for _, _, d in cells]
    depths = list(spec.background - rng.uniform(spec.center_min, spec.center_max, len(cells)))
    speckles = _place_speckles(rng, spec, cells)
    sp_depths = list(spec.background - rng.uniform(spec.speckle_min, spec.speckle_max, len(speckles)))

    raster = synthesize(
        (spec.height, spec.width),
        centers,
        diameters,
        depths,
        spec.background,
        noise_amplitude=spec.noise_amplitude,
        noise_scale=spec.noise_scale,
        rng=rng,
        speckles=speckles,
        speckle_size=spec.speckle_size,
        speckle_depths=sp_depths,
    )
    truth = PointSet(tuple(centers), "truth")
    return raster, truth
