"""Cell-centre detection: diffuse, take minimal plateaus, filter them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .diffusion import DiffusionParams, pm_run
from .raster import PointSet, Raster

DEFAULT_THRESHOLD = 150.0
DEFAULT_MIN_BLOB_AREA = 60

_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


@dataclass(frozen=True)
class DetectionParams:
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    intensity_threshold: float = DEFAULT_THRESHOLD
    min_blob_area: int = DEFAULT_MIN_BLOB_AREA
    connectivity: int = 8
    auto_threshold: str | None = None

    def __post_init__(self):
        if not 0 <= self.intensity_threshold <= 255:
            raise ValueError(
                f"intensity_threshold must lie in [0, 255], got {self.intensity_threshold}"
            )
        if int(self.min_blob_area) != self.min_blob_area or self.min_blob_area < 1:
            raise ValueError(f"min_blob_area must be an integer >= 1, got {self.min_blob_area}")
        _structure(self.connectivity)
        if self.auto_threshold not in (None, "otsu"):
            raise ValueError(f"unknown auto_threshold {self.auto_threshold!r}")

    def to_dict(self) -> dict:
        return {
            "diffusion": self.diffusion.to_dict(),
            "intensity_threshold": self.intensity_threshold,
            "min_blob_area": int(self.min_blob_area),
            "connectivity": self.connectivity,
            "auto_threshold": self.auto_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionParams":
        d = dict(d)
        if "diffusion" in d:
            d["diffusion"] = DiffusionParams.from_dict(d["diffusion"])
        return cls(**d)


@dataclass(frozen=True)
class Detection:
    points: PointSet
    rejected: dict
    threshold: float
    n_candidates: int

    def __post_init__(self):
        assert len(self.points) + sum(self.rejected.values()) == self.n_candidates


@dataclass(frozen=True)
class ComponentMap:
    labels: np.ndarray
    areas: np.ndarray  # areas[k] is the pixel count of label k; areas[0] == 0

    @property
    def n_components(self) -> int:
        return len(self.areas) - 1


def local_minima(u: Raster) -> PointSet:
    """One point per minimal plateau of ``u``.

    A minimal plateau is a maximal 8-connected equal-intensity region whose
    in-bounds exterior neighbours are all strictly brighter.  Its
    representative is the centroid rounded half-up per axis; when that pixel
    lies outside the plateau, the closest plateau pixel is taken instead
    (ties to smaller y, then smaller x).  Points come out in raster order.
    """
    a = u.data
    H, W = a.shape
    # pixels no brighter than any neighbour; adjacent such pixels are equal
    is_low = a <= ndimage.minimum_filter(a, size=3, mode="nearest")

    pa = np.pad(a, 1, mode="constant", constant_values=np.nan)
    plow = np.pad(is_low, 1, mode="constant", constant_values=False)
    leaks = np.zeros_like(is_low)
    for dy, dx in _NEIGHBOURS:
        nb = pa[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        nb_low = plow[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        # equal-valued neighbour that is itself not minimal: the plateau
        # continues into a region that drains somewhere lower
        leaks |= (nb == a) & ~nb_low
    leaks &= is_low

    labels, n = ndimage.label(is_low, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return PointSet((), "minima")
    ys, xs = np.nonzero(is_low)
    lab = labels[ys, xs]
    bad = np.zeros(n + 1, dtype=bool)
    bad[labels[leaks]] = True

    count = np.bincount(lab, minlength=n + 1)
    cy = np.bincount(lab, weights=ys, minlength=n + 1)[1:] / count[1:]
    cx = np.bincount(lab, weights=xs, minlength=n + 1)[1:] / count[1:]
    ry = np.floor(cy + 0.5).astype(np.int64)
    rx = np.floor(cx + 0.5).astype(np.int64)
    ids = np.arange(1, n + 1)
    inside = labels[ry, rx] == ids

    reps = []
    for k in np.nonzero(~bad[1:])[0]:
        if inside[k]:
            reps.append((int(ry[k]), int(rx[k])))
            continue
        sel = lab == k + 1
        py, px = ys[sel], xs[sel]
        d2 = (py - cy[k]) ** 2 + (px - cx[k]) ** 2
        j = np.lexsort((px, py, d2))[0]
        reps.append((int(py[j]), int(px[j])))
    reps.sort()
    return PointSet(tuple((x, y) for y, x in reps), "minima")


def strict_minima_count(u: Raster) -> int:
    """Pixels strictly darker than every in-bounds 8-neighbour."""
    a = u.data
    fp = np.ones((3, 3), dtype=bool)
    fp[1, 1] = False
    nb_min = ndimage.minimum_filter(a, footprint=fp, mode="constant", cval=np.inf)
    return int(np.count_nonzero(a < nb_min))


def component_areas(u: Raster, threshold: float, connectivity: int = 8) -> ComponentMap:
    """Label connected regions of ``u <= threshold``."""
    mask = u.data <= threshold
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    areas[0] = 0
    return ComponentMap(labels, areas)


def otsu_threshold(u: Raster) -> float:
    """Otsu's threshold over a 256-bin histogram of [0, 255].

    Returned as the upper edge of the darker class, so ``u <= t`` selects it.
    """
    hist, edges = np.histogram(u.data, bins=256, range=(0.0, 256.0))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 / w0[-1] - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(min(edges[k + 1], 255.0))


def select_candidates(u: Raster, p: DetectionParams, threshold: float | None = None) -> Detection:
    """Filtering stage of :func:`detect` on an already diffused raster."""
    theta = p.intensity_threshold if threshold is None else threshold
    cands = local_minima(u)
    if len(cands) == 0:
        return Detection(PointSet((), "method"), {"above_threshold": 0, "small_blob": 0}, theta, 0)
    xy = cands.as_array()
    vals = u.data[xy[:, 1], xy[:, 0]]
    dark = vals <= theta
    comps = component_areas(u, theta, p.connectivity)
    area = comps.areas[comps.labels[xy[:, 1], xy[:, 0]]]
    big = area >= p.min_blob_area
    keep = dark & big
    return Detection(
        PointSet.from_array(xy[keep], "method"),
        {
            "above_threshold": int(np.count_nonzero(~dark)),
            "small_blob": int(np.count_nonzero(dark & ~big)),
        },
        theta,
        len(cands),
    )


def detect(u0: Raster, p: DetectionParams | None = None, threads: int | None = None) -> Detection:
    """Diffuse ``u0`` and return the filtered minima as neuron centres."""
    p = DetectionParams() if p is None else p
    u = pm_run(u0, p.diffusion, threads=threads)
    theta = otsu_threshold(u) if p.auto_threshold == "otsu" else p.intensity_threshold
    return select_candidates(u, p, theta)


def calibrate_threshold(
    rasters,
    truths,
    p: DetectionParams | None = None,
    candidates=None,
    radius: float = 11.0,
    threads: int | None = None,
) -> tuple[float, float]:
    """Pick the intensity threshold maximising pooled F1 against ground truth.

    Returns ``(threshold, f1)``; ties go to the lower threshold.
    """
    from .metrics import detection_stats

    p = DetectionParams() if p is None else p
    if candidates is None:
        candidates = np.arange(100.0, 251.0, 2.0)
    diffused = [pm_run(r, p.diffusion, threads=threads) for r in rasters]
    best = (None, -1.0)
    for theta in candidates:
        tp = fp = fn = 0
        for u, truth in zip(diffused, truths):
            st = detection_stats(truth, select_candidates(u, p, float(theta)).points, radius)
            tp, fp, fn = tp + st["tp"], fp + st["fp"], fn + st["fn"]
        f1 = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) else 1.0
        if f1 > best[1]:
            best = (float(theta), f1)
    return best
