"""``neundiff`` command line: diffuse, detect, eval, density, synth.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .density import DEFAULT_BLUR_SIGMA, DEFAULT_FRAME_SIZE, bin_points, render_density
from .detection import DetectionParams, otsu_threshold, select_candidates
from .diffusion import DiffusionParams, iters_for_resolution, pm_run
from .metrics import DEFAULT_RADIUS, agreement_report, detection_stats
from .raster import (
    GRAY_MODES,
    PointSet,
    downsample2,
    load_points,
    load_raster,
    save_points,
    save_raster,
)
from .synth import GenerationError, SynthSpec, generate

log = logging.getLogger("neundiff")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3
# options that steer execution but never change results
_RUNTIME_KEYS = {"config", "threads", "timing", "verbose", "func", "command"}
# output locations are not part of the reproducible configuration
_OUTPUT_KEYS = {"out", "csv", "output", "out_prefix"}
SECTION_SIDE_PX = 30000


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.stages: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def mark(self, stage: str):
        now = time.perf_counter()
        self.stages[stage] = (now - self._t0) * 1000.0
        self._t0 = now

    @property
    def total_ms(self) -> float:
        return sum(self.stages.values())

    def report(self, n_pixels: int | None = None):
        if not self.enabled:
            return
        for stage, ms in self.stages.items():
            print(f"timing {stage}: {ms:.1f} ms", file=sys.stderr)
        print(f"timing total: {self.total_ms:.1f} ms", file=sys.stderr)
        if n_pixels:
            per_px_us = self.total_ms * 1000.0 / n_pixels
            section_min = per_px_us * SECTION_SIDE_PX**2 / 1e6 / 60.0
            print(f"timing per_pixel: {per_px_us:.4f} us", file=sys.stderr)
            print(
                f"timing extrapolated {SECTION_SIDE_PX}x{SECTION_SIDE_PX} section: "
                f"{section_min:.1f} min",
                file=sys.stderr,
            )


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file whose keys override command-line flags")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $NEUNDIFF_THREADS or all cores)")
    p.add_argument("--timing", action="store_true", help="print per-stage wall-clock times")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_raster_input(p):
    p.add_argument("--gray_mode", "--gray-mode", choices=GRAY_MODES, default="luminance")
    p.add_argument("--spacing_h", "--spacing-h", type=float, default=1.0)
    p.add_argument("--downsample", action="store_true",
                   help="2x2 box-average before processing; n_iters defaults to a quarter")


def _add_diffusion(p):
    g = p.add_argument_group("diffusion")
    g.add_argument("--lambda", dest="lambda_", type=float, default=11.0)
    g.add_argument("--dt", type=float, default=None, help="time step (default h^2/7)")
    g.add_argument("--n_iters", "--n-iters", type=int, default=None, help="iterations (default 12)")
    g.add_argument("--boundary", choices=("dirichlet", "neumann"), default="dirichlet")
    g.add_argument("--diag_weight", "--diag-weight", type=float, default=0.5)
    g.add_argument("--laplacian_normalized", "--laplacian-normalized",
                   action=argparse.BooleanOptionalAction, default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neundiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"neundiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("diffuse", help="run Perona-Malik diffusion on a raster")
    p.add_argument("input", nargs="?")
    p.add_argument("output")
    _add_raster_input(p)
    _add_diffusion(p)
    _add_common(p)
    p.set_defaults(func=cmd_diffuse)

    p = sub.add_parser("detect", help="detect cell centres")
    p.add_argument("input", nargs="?")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="points CSV path (default: report path with .csv)")
    _add_raster_input(p)
    _add_diffusion(p)
    g = p.add_argument_group("filtering")
    g.add_argument("--intensity_threshold", "--intensity-threshold", type=float, default=150.0)
    g.add_argument("--min_blob_area", "--min-blob-area", type=int, default=60)
    g.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    g.add_argument("--auto_threshold", "--auto-threshold", choices=("otsu",), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="agreement between rater / method point sets")
    p.add_argument("raters", nargs="*", help="rater point CSVs")
    p.add_argument("--method", default=None, help="method (detected) point CSV")
    p.add_argument("--truth", default=None, help="ground-truth CSV for detection statistics")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("density", help="bin points into a density map")
    p.add_argument("points")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--like", default=None, help="take width/height from this raster")
    p.add_argument("--frame_size", "--frame-size", type=int, default=DEFAULT_FRAME_SIZE)
    p.add_argument("--blur_sigma", "--blur-sigma", type=float, default=DEFAULT_BLUR_SIGMA)
    p.add_argument("--um_per_px", "--um-per-px", type=float, default=None)
    p.add_argument("--out", required=True, help="rendered PNG path")
    p.add_argument("--csv", default=None, help="raw counts CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("synth", help="generate a synthetic raster and its truth points")
    p.add_argument("--out_prefix", "--out-prefix", required=True)
    defaults = SynthSpec()
    for name, value in defaults.to_dict().items():
        p.add_argument(f"--{name}", type=type(value), default=value)
    _add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def _load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    # a detect/synth report can be fed back directly
    if isinstance(cfg.get("config"), dict):
        cfg = cfg["config"]
    return cfg


def resolve_args(ns: argparse.Namespace) -> argparse.Namespace:
    if ns.config:
        cfg = _load_config(ns.config)
        cfg.pop("command", None)
        if "lambda" in cfg:
            cfg["lambda_"] = cfg.pop("lambda")
        known = set(vars(ns)) - _RUNTIME_KEYS - _OUTPUT_KEYS
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys for {ns.command}: {sorted(unknown)}")
        for k, v in cfg.items():
            setattr(ns, k, v)
    if ns.threads is None and os.environ.get("NEUNDIFF_THREADS"):
        try:
            ns.threads = int(os.environ["NEUNDIFF_THREADS"])
        except ValueError:
            raise UsageError("NEUNDIFF_THREADS must be an integer") from None
    if ns.threads is not None and ns.threads < 1:
        raise UsageError("--threads must be >= 1")
    if hasattr(ns, "input") and ns.input is None:
        raise UsageError(f"{ns.command}: no input raster given (positional or via --config)")
    return ns


def run_config(ns: argparse.Namespace) -> dict:
    """The result-determining part of the arguments, JSON-ready."""
    cfg = {k: v for k, v in vars(ns).items() if k not in _RUNTIME_KEYS | _OUTPUT_KEYS}
    if "lambda_" in cfg:
        cfg["lambda"] = cfg.pop("lambda_")
    cfg["command"] = ns.command
    return cfg


def _diffusion_params(ns) -> DiffusionParams:
    n_iters = ns.n_iters
    if n_iters is None:
        n_iters = 12
        if ns.downsample:
            n_iters = iters_for_resolution(n_iters, 1.0, 2.0)
        ns.n_iters = n_iters
    p = DiffusionParams(
        lambda_=ns.lambda_,
        dt=ns.dt,
        n_iters=n_iters,
        boundary=ns.boundary,
        diag_weight=ns.diag_weight,
        h=ns.spacing_h,
        laplacian_normalized=ns.laplacian_normalized,
    )
    ns.dt = p.dt
    return p


def _read_input(ns):
    r = load_raster(ns.input, gray_mode=ns.gray_mode, spacing_h=ns.spacing_h)
    if ns.downsample:
        r = downsample2(r)
    return r


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_diffuse(ns) -> int:
    timer = _Timer(ns.timing)
    params = _diffusion_params(ns)
    r = _read_input(ns)
    timer.mark("load")
    out = pm_run(r, params, threads=ns.threads)
    timer.mark("diffuse")
    save_raster(out, ns.output)
    timer.mark("write")
    timer.report(r.width * r.height)
    return EXIT_OK


def cmd_detect(ns) -> int:
    timer = _Timer(ns.timing)
    dparams = _diffusion_params(ns)
    params = DetectionParams(
        diffusion=dparams,
        intensity_threshold=ns.intensity_threshold,
        min_blob_area=ns.min_blob_area,
        connectivity=ns.connectivity,
        auto_threshold=ns.auto_threshold,
    )
    r = _read_input(ns)
    timer.mark("load")
    u = pm_run(r, dparams, threads=ns.threads)
    timer.mark("diffuse")
    theta = otsu_threshold(u) if params.auto_threshold == "otsu" else params.intensity_threshold
    det = select_candidates(u, params, theta)
    timer.mark("select")

    pts = det.points
    if ns.downsample:
        # centre of the 2x2 source block, rounded half-up
        pts = PointSet(tuple((2 * x + 1, 2 * y + 1) for x, y in pts), pts.source_label)
    csv_path = ns.csv or str(Path(ns.out).with_suffix(".csv"))
    save_points(pts, csv_path)
    report = {
        "version": __version__,
        "config": run_config(ns),
        "params": {**params.to_dict(), "resolved_threshold": theta},
        "detections": [{"x": x, "y": y} for x, y in pts],
        "rejected": det.rejected,
        "n_candidates": det.n_candidates,
        "runtime_ms": int(round(timer.total_ms)),
    }
    _write_json(ns.out, report)
    timer.mark("write")
    log.info("%d detections (%s rejected)", len(pts), det.rejected)
    timer.report(r.width * r.height)
    return EXIT_OK


def _round4(obj):
    if isinstance(obj, float):
        return round(obj, 4)
    if isinstance(obj, dict):
        return {k: _round4(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round4(v) for v in obj]
    return obj


def cmd_eval(ns) -> int:
    raters = [load_points(p) for p in ns.raters]
    method = load_points(ns.method) if ns.method else None
    truth = load_points(ns.truth) if ns.truth else None
    if truth is not None and method is None:
        raise UsageError("--truth needs --method (the detected set) to compare against")
    if len(raters) < 2 and truth is None and not (raters and method is not None):
        raise UsageError("give at least two raters, a rater and --method, or --truth with --method")
    report = {"version": __version__, "config": run_config(ns)}
    if raters:
        report.update(agreement_report(raters, method, ns.radius))
    if truth is not None:
        report["detection_stats"] = detection_stats(truth, method, ns.radius)
    text = json.dumps(_round4(report), indent=2, sort_keys=True)
    print(text)
    if ns.out:
        Path(ns.out).write_text(text + "\n")
    return EXIT_OK


def cmd_density(ns) -> int:
    timer = _Timer(ns.timing)
    width, height = ns.width, ns.height
    if ns.like:
        like = load_raster(ns.like)
        width, height = like.width, like.height
        ns.width, ns.height = width, height
    if width is None or height is None:
        raise UsageError("density needs --width and --height, or --like")
    ps = load_points(ns.points)
    grid = bin_points(ps, width, height, ns.frame_size)
    timer.mark("bin")
    save_raster(render_density(grid, ns.blur_sigma), ns.out)
    if ns.csv:
        Path(ns.csv).write_text(grid.to_csv())
    timer.mark("render")
    meta = {
        "version": __version__,
        "config": run_config(ns),
        "grid_shape": list(grid.counts.shape),
        "n_points": int(grid.counts.sum()),
        "max_count": int(grid.counts.max()) if grid.counts.size else 0,
        "frame_area_um2": grid.frame_area_um2(ns.um_per_px),
    }
    print(json.dumps(meta, indent=2, sort_keys=True))
    timer.report()
    return EXIT_OK


def cmd_synth(ns) -> int:
    timer = _Timer(ns.timing)
    spec = SynthSpec.from_dict({k: getattr(ns, k) for k in SynthSpec().to_dict()})
    raster, truth = generate(spec)
    timer.mark("generate")
    prefix = ns.out_prefix
    save_raster(raster, f"{prefix}.png")
    save_points(truth, f"{prefix}.csv")
    _write_json(f"{prefix}.json", {"version": __version__, "config": run_config(ns), "spec": spec.to_dict()})
    timer.mark("write")
    timer.report(raster.width * raster.height)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(ns.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        ns = resolve_args(ns)
        return ns.func(ns)
    except OSError as e:
        print(f"neundiff: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, GenerationError) as e:
        print(f"neundiff: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"neundiff: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
