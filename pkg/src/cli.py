"""
CLI Module
Command-line surface: boost, eval, loss, tile-plan, decode-bimodal, bench
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config.settings import Settings
from src.backends import (
    DepthRequest,
    ProcessPerceptualBackend,
    RecordingBackend,
    check_response,
    parse_backend_spec,
)
from src.bimodal import decode_field, mode_confidence
from src.boost import BoostConfig, SimpleBoost, plan_tiles
from src.errors import BackendError, ConfigError, EffDepthError, ManifestError
from src.grid_core import Rect
from src.io_formats import load_depth, load_image, load_manifest, read_bimodal_pfm, save_depth
from src.losses import LossWeights, MeanAbsolutePerceptual, PerceptualBackend, loss_total
from src.metrics import AlignMode, EvalConfig, evaluate_dataset
from src.reporter import Reporter

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

DEFAULT_CONFIG = "config/settings.yaml"
_DEFAULTS = Settings.DEFAULT_SETTINGS


def _default(key: str):
    section, name = key.split(".")
    return _DEFAULTS[section][name]


def _add_boost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch", type=int, help=f"Tile side in pixels (default: {_default('boost.patch')})")
    p.add_argument("--overlap", type=int, help=f"Minimum tile overlap in pixels (default: {_default('boost.overlap')})")
    p.add_argument(
        "--ref-size",
        type=int,
        help=f"Longest side of the reference pass (default: {_default('boost.reference_size')})",
    )
    p.add_argument(
        "--passthrough",
        type=int,
        help=f"Longest side at or below which the backend runs once (default: {_default('boost.passthrough_max_side')})",
    )
    p.add_argument("--no-align", action="store_true", help="Skip per-patch alignment (naive mosaic)")
    p.add_argument("--jobs", type=int, help="Concurrent tile workers (default: available CPUs)")
    p.add_argument("--io-dir", help="Exchange directory for cmd: backends (default: system temp)")


def build_parser() -> argparse.ArgumentParser:
    """Build the effdepth parser with one subparser per command"""
    parser = argparse.ArgumentParser(
        prog="effdepth",
        description="High-resolution depth boosting, evaluation and loss auditing",
    )
    parser.add_argument(
        "-c", "--config",
        help=f"Path to configuration file (default: {DEFAULT_CONFIG})",
        default=DEFAULT_CONFIG,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("boost", help="Patch-wise high-resolution depth for one image")
    p.add_argument("--image", required=True, help="Input PNG or PPM image")
    p.add_argument("--backend", required=True, help="synthetic:<scene>?k=v | dir:<path> | cmd:<template>")
    p.add_argument("--out", required=True, help="Output depth file (.pfm, .png or .raw)")
    p.add_argument("--image-id", help="Key used by dir: backends (default: image file stem)")
    p.add_argument("--dump-patches", metavar="DIR", help="Write reference, raw and aligned patches here")
    p.add_argument("--record", metavar="DIR", help="Store every backend answer for later dir: replay")
    _add_boost_flags(p)
    p.set_defaults(handler=cmd_boost)

    p = sub.add_parser("eval", help="AbsRel, 100(1-d1) and WHDR over a manifest")
    p.add_argument("--manifest", required=True, help="JSON dataset manifest")
    p.add_argument("--no-align", action="store_true", help="Compare predictions without least-squares alignment")
    p.add_argument("--delta", type=float, help=f"delta_1 ratio threshold (default: {_default('eval.delta_threshold')})")
    p.add_argument("--whdr-margin", type=float, help=f"Relative equality margin (default: {_default('eval.whdr_margin')})")
    p.add_argument("--depth-cap", type=float, help="Ignore ground truth deeper than this (default: none)")
    p.add_argument("--report", help="Write the JSON report here")
    p.add_argument("--jobs", type=int, help="Concurrent sample workers (default: 1)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("loss", help="Weighted three-term loss between two depth files")
    p.add_argument("--pred", required=True, help="Predicted depth file")
    p.add_argument("--gt", required=True, help="Reference depth file")
    p.add_argument("--alpha-l", type=float, help=f"Weight of the SSI term (default: {_default('losses.alpha_l')})")
    p.add_argument("--alpha-edge", type=float, help=f"Weight of the edge term (default: {_default('losses.alpha_edge')})")
    p.add_argument("--alpha-lpips", type=float, help=f"Weight of the perceptual term (default: {_default('losses.alpha_lpips')})")
    p.add_argument(
        "--perceptual",
        default="mae",
        help="mae (mean absolute difference) or cmd:<template with {a} {b} {output}> (default: mae)",
    )
    p.add_argument("--json", action="store_true", help="Print JSON instead of text")
    p.set_defaults(handler=cmd_loss)

    p = sub.add_parser("tile-plan", help="Show the tiles for an image size")
    p.add_argument("--width", type=int, required=True, help="Image width in pixels")
    p.add_argument("--height", type=int, required=True, help="Image height in pixels")
    p.add_argument("--patch", type=int, help=f"Tile side in pixels (default: {_default('boost.patch')})")
    p.add_argument("--overlap", type=int, help=f"Minimum tile overlap in pixels (default: {_default('boost.overlap')})")
    p.add_argument("--json", action="store_true", help="Print JSON instead of a table")
    p.set_defaults(handler=cmd_tile_plan)

    p = sub.add_parser("decode-bimodal", help="Decode a 5-plane mixture field to disparity")
    p.add_argument("--field", required=True, help="Bimodal PFM field")
    p.add_argument("--out", required=True, help="Output depth file")
    p.add_argument("--confidence", help="Also write the mode confidence map here")
    p.set_defaults(handler=cmd_decode_bimodal)

    p = sub.add_parser("bench", help="Time boosting per image, excluding image loading")
    p.add_argument("--manifest", required=True, help="JSON manifest listing image_path per entry")
    p.add_argument("--backend", required=True, help="synthetic:<scene>?k=v | dir:<path> | cmd:<template>")
    p.add_argument("--repeat", type=int, default=3, help="Timed runs per image (default: 3)")
    p.add_argument(
        "--compare-passthrough",
        action="store_true",
        help="Also time one full-image backend call per image",
    )
    p.add_argument("--report", help="Write the JSON timings here")
    _add_boost_flags(p)
    p.set_defaults(handler=cmd_bench)

    return parser


# ---------------------------------------------------------------------------
# Helpers

def _configure_logging(settings: Settings, verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, str(settings.get("logging.level", "INFO")).upper(), logging.INFO)
    logging.basicConfig(level=level, format=settings.get("logging.format"), stream=sys.stderr)
    logging.getLogger().setLevel(level)


def _boost_config(settings: Settings, args) -> BoostConfig:
    base = settings.boost_config()
    overrides = {
        "patch": getattr(args, "patch", None),
        "overlap": getattr(args, "overlap", None),
        "reference_size": getattr(args, "ref_size", None),
        "passthrough_max_side": getattr(args, "passthrough", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "no_align", False):
        overrides["align_patches"] = False
    try:
        return BoostConfig(**{**base.model_dump(), **overrides})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _jobs(settings: Settings, args) -> Optional[int]:
    jobs = getattr(args, "jobs", None) or settings.get("runtime.jobs")
    if jobs is None:
        return None
    try:
        count = int(jobs)
    except (TypeError, ValueError):
        raise ConfigError(f"--jobs must be an integer, got {jobs!r}") from None
    if count < 1:
        raise ConfigError(f"--jobs must be at least 1, got {count}")
    return count


def _backend(settings: Settings, args):
    return parse_backend_spec(
        args.backend,
        timeout=settings.backend_timeout(),
        io_dir=getattr(args, "io_dir", None) or settings.get("backend.io_dir"),
    )


def _perceptual(spec: str, settings: Settings) -> PerceptualBackend:
    if spec == "mae":
        return MeanAbsolutePerceptual()
    if spec.startswith("cmd:"):
        return ProcessPerceptualBackend(
            spec[len("cmd:"):],
            io_dir=settings.get("backend.io_dir"),
            timeout=settings.backend_timeout(),
        )
    raise ConfigError(f"unknown perceptual backend {spec!r}")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_boost(args, settings: Settings) -> int:
    """
    Boost one image and write the depth file

    Prints the tile table (or the pass-through note), the tile and backend
    call counts and the wall time.

    Returns:
        EXIT_OK, or EXIT_PARTIAL when the backend fails
    """
    cfg = _boost_config(settings, args)
    backend = _backend(settings, args)
    if args.record:
        backend = RecordingBackend(backend, args.record)
    image = load_image(args.image)
    image_id = args.image_id or Path(args.image).stem

    runner = SimpleBoost(backend, cfg, jobs=_jobs(settings, args), dump_dir=args.dump_patches)
    start = time.perf_counter()
    try:
        result = runner.run(image, image_id=image_id)
    except BackendError as e:
        logger.error("boost failed: %s", e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    elapsed = time.perf_counter() - start
    save_depth(result.depth, args.out)

    reporter = Reporter(float_format="{:.6g}")
    if result.passthrough:
        print(f"pass-through: {image.width}x{image.height} <= {cfg.passthrough_max_side}")
    else:
        print(reporter.to_table(reporter.tile_frame(result.plan, result.alignments)))
    print(f"tiles: {result.tile_count}")
    print(f"backend calls: {result.backend_calls}")
    print(f"wall time: {elapsed:.3f} s")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    """
    Evaluate a manifest, print the per-sample table and optionally save a JSON report

    Returns:
        EXIT_PARTIAL when any sample failed, EXIT_OK otherwise
    """
    overrides = {}
    if args.no_align:
        overrides["align"] = AlignMode.NONE
    if args.delta is not None:
        overrides["delta_threshold"] = args.delta
    if args.whdr_margin is not None:
        overrides["whdr_margin"] = args.whdr_margin
    if args.depth_cap is not None:
        overrides["depth_cap"] = args.depth_cap
    try:
        cfg = EvalConfig(**{**settings.eval_config().model_dump(), **overrides})
    except ValueError as e:
        raise ConfigError(str(e)) from None

    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(manifest, cfg, jobs=_jobs(settings, args) or 1)

    reporter = Reporter()
    print(reporter.to_table(reporter.eval_frame(report)))
    for error in report.errors:
        print(f"Error: sample '{error.sample_id}': {error.message}", file=sys.stderr)
    if args.report:
        reporter.save_report(reporter.to_json(report.to_dict()), args.report)
    return EXIT_PARTIAL if report.partial_failure else EXIT_OK


def cmd_loss(args, settings: Settings) -> int:
    """Print the loss terms between two depth files"""
    base = settings.loss_weights().model_dump()
    overrides = {"alpha_l": args.alpha_l, "alpha_edge": args.alpha_edge, "alpha_lpips": args.alpha_lpips}
    try:
        weights = LossWeights(**{**base, **{k: v for k, v in overrides.items() if v is not None}})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    pred = load_depth(args.pred)
    gt = load_depth(args.gt)
    breakdown = loss_total(pred, gt, _perceptual(args.perceptual, settings), weights)
    if args.json:
        print(json.dumps(breakdown.as_dict(), indent=2))
    else:
        for name, value in breakdown.as_dict().items():
            print(f"{name:<8} {value:.6f}")
    return EXIT_OK


def cmd_tile_plan(args, settings: Settings) -> int:
    """Print the tile layout for an image size"""
    cfg = _boost_config(settings, args)
    plan = plan_tiles(args.width, args.height, cfg)
    if args.json:
        print(json.dumps(
            {
                "width": plan.image_w,
                "height": plan.image_h,
                "patch": plan.patch,
                "overlap": plan.overlap,
                "x_starts": list(plan.x_axis.starts),
                "y_starts": list(plan.y_axis.starts),
                "tiles": [tile.to_dict() for tile in plan.tiles],
            },
            indent=2,
        ))
    else:
        reporter = Reporter()
        print(reporter.to_table(reporter.tile_frame(plan)))
        print(f"x starts: {list(plan.x_axis.starts)}")
        print(f"y starts: {list(plan.y_axis.starts)}")
    print(f"tiles: {len(plan)}")
    return EXIT_OK


def cmd_decode_bimodal(args, settings: Settings) -> int:
    """Decode a "Pm" field to disparity, optionally writing the confidence ratio too"""
    field = read_bimodal_pfm(Path(args.field).read_bytes())
    save_depth(decode_field(field), args.out)
    print(f"wrote {args.out}")
    if args.confidence:
        save_depth(mode_confidence(field), args.confidence)
        print(f"wrote {args.confidence}")
    return EXIT_OK


def _time_full_call(backend, image, image_id: str) -> float:
    w, h = image.width, image.height
    request = DepthRequest(image, Rect.full(w, h), (w, h), w, h, image_id)
    start = time.perf_counter()
    check_response(request, backend.infer(request))
    return time.perf_counter() - start


def cmd_bench(args, settings: Settings) -> int:
    """
    Time SimpleBoost per manifest image, optionally next to one full-image call

    Images are decoded before timing starts; each image runs args.repeat times.

    Returns:
        EXIT_OK, or EXIT_PARTIAL when the backend fails
    """
    if args.repeat < 1:
        raise ConfigError(f"--repeat must be at least 1, got {args.repeat}")
    cfg = _boost_config(settings, args)
    backend = _backend(settings, args)
    manifest = load_manifest(args.manifest)

    # images are decoded before any timer starts
    images = {entry.id: load_image(manifest.resolve(entry.image_path)) for entry in manifest.entries}
    runner = SimpleBoost(backend, cfg, jobs=_jobs(settings, args))

    timings: Dict[str, List[float]] = {}
    single: Dict[str, List[float]] = {}
    try:
        for image_id, image in images.items():
            for _ in range(args.repeat):
                start = time.perf_counter()
                runner.run(image, image_id=image_id)
                timings.setdefault(image_id, []).append(time.perf_counter() - start)
                if args.compare_passthrough:
                    single.setdefault(image_id, []).append(_time_full_call(backend, image, image_id))
    except BackendError as e:
        logger.error("bench failed: %s", e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL

    reporter = Reporter(float_format="{:.6f}")
    frame = reporter.bench_frame(timings)
    print(reporter.to_table(frame))
    data = {"boost": frame.to_dict(orient="records")}
    if args.compare_passthrough:
        single_frame = reporter.bench_frame(single)
        print("\nsingle full-image call:")
        print(reporter.to_table(single_frame))
        data["single_call"] = single_frame.to_dict(orient="records")
    if args.report:
        reporter.save_report(reporter.to_json(data), args.report)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command-line entry point

    Args:
        argv: Arguments without the program name; defaults to sys.argv[1:]

    Returns:
        Exit code: 0 on success, 1 for backend or sample failures, 2 for
        usage, configuration or manifest errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        settings = Settings(config_file=args.config)
        _configure_logging(settings, args.verbose)
        return args.handler(args, settings)
    except (ConfigError, ManifestError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EffDepthError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
