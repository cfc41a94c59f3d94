"""Neuron-centre detection in histology rasters by Perona-Malik diffusion."""

__version__ = "0.1.0"

from .density import DensityGrid, bin_points, render_density
from .detection import (
    Detection,
    DetectionParams,
    component_areas,
    detect,
    local_minima,
)
from .diffusion import (
    DiffusionParams,
    diffusivity,
    fwhm_of,
    iters_for_resolution,
    pm_run,
    pm_step,
)
from .metrics import (
    Matching,
    delta_ratio,
    detection_stats,
    match_points,
    overlap_breakdown,
    pairwise_agreement,
)
from .raster import PointSet, Raster, load_points, load_raster, save_points, save_raster
from .synth import SynthSpec, generate

__all__ = [
    "DensityGrid",
    "Detection",
    "DetectionParams",
    "DiffusionParams",
    "Matching",
    "PointSet",
    "Raster",
    "SynthSpec",
    "bin_points",
    "component_areas",
    "delta_ratio",
    "detect",
    "detection_stats",
    "diffusivity",
    "fwhm_of",
    "generate",
    "iters_for_resolution",
    "load_points",
    "load_raster",
    "local_minima",
    "match_points",
    "overlap_breakdown",
    "pairwise_agreement",
    "pm_run",
    "pm_step",
    "render_density",
    "save_points",
    "save_raster",
]
