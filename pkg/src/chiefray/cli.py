"""Command-line driver.

Subcommands mirror the pipeline stages (bench, patterns, simulate, decode,
blobs, chief, calibrate, eval) plus ``run`` for the whole chain. Exit codes:
0 ok, 2 validation failure, 3 pipeline-stage failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, pipeline
from .errors import BenchValidationError, ChiefRayError, PipelineStageError
from .graycode import generate_patterns
from .simulate import ground_truth_intrinsics

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3
EXIT_IO = 4


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="bench configuration JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chiefray", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="validate a bench config and print its true intrinsics")
    _add_config(p)

    p = sub.add_parser("patterns", help="write the gray-code pattern stack as PGM frames")
    _add_config(p)
    p.add_argument("out_dir")

    p = sub.add_parser("simulate", help="render the pattern stack to scanner PGMs")
    _add_config(p)
    p.add_argument("out_dir")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="scan registration jitter (scan px)")
    p.add_argument("--samples", type=int, default=None, help="aperture samples per pixel")
    p.add_argument("--seed", type=int, default=None, help="override the bench rng seed")

    p = sub.add_parser("decode", help="decode rendered scans into a projector-coordinate map")
    _add_config(p)
    p.add_argument("scans_dir")
    p.add_argument("out_path")

    p = sub.add_parser("blobs", help="segment blobs and recognize pinhole grids")
    _add_config(p)
    p.add_argument("scans_dir")
    p.add_argument("out_csv")

    p = sub.add_parser("chief", help="extract chief-ray samples from blobs")
    _add_config(p)
    p.add_argument("scans_dir")
    p.add_argument("decoded_map")
    p.add_argument("out_csv")
    p.add_argument("--naive-chief", action="store_true", help="use the ellipse-centre baseline")

    p = sub.add_parser("calibrate", help="run the robust intrinsic calibration")
    _add_config(p)
    p.add_argument("chief_csv")
    p.add_argument("out_dir")
    p.add_argument("--max-exclusion", type=float, default=0.10)

    p = sub.add_parser("eval", help="dot-placement evaluation against a planar target")
    _add_config(p)
    p.add_argument("report", help="calibration report JSON")
    p.add_argument("out_csv")
    p.add_argument("--target-pose", default=None, help="board spec JSON file")
    p.add_argument("--manifest", default=None, help="verify the report against this manifest")

    p = sub.add_parser("run", help="run the full pipeline into an output directory")
    _add_config(p)
    p.add_argument("out_dir")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--naive-chief", action="store_true")
    p.add_argument("--max-exclusion", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    return parser


def _cmd_bench(args) -> int:
    bench = pipeline.load_bench(args.config)
    K = ground_truth_intrinsics(bench.projector)
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    raster = bench.scanner_raster()
    print(f"bench ok: {len(bench.masks)} masks, scanner {raster.width_px}x{raster.height_px} px")
    print(f"ground-truth intrinsics: fx={K.fx:.4f} fy={K.fy:.4f} cx={K.cx:.4f} cy={K.cy:.4f}")
    print(f"pattern stack: {stack.frame_count} frames")
    return EXIT_OK


def _cmd_patterns(args) -> int:
    bench = pipeline.load_bench(args.config)
    paths = pipeline.stage_patterns(bench, args.out_dir)
    print(f"wrote {len(paths)} pattern frames to {args.out_dir}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    bench = pipeline.load_bench(args.config)
    if args.seed is not None:
        import dataclasses

        bench = dataclasses.replace(bench, rng_seed=int(args.seed))
    out = pipeline.stage_simulate(
        bench, args.out_dir, noise_sigma_px=args.noise_sigma, samples_per_pixel=args.samples
    )
    print(f"wrote {len(out['scans'])} scans and {out['gt_table']}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    bench = pipeline.load_bench(args.config)
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    scans = pipeline.PgmScanSeries(pipeline.scan_paths(args.scans_dir, stack.frame_count))
    dmap = pipeline.stage_decode(bench, scans, args.out_path)
    n_valid = int(dmap.valid.sum())
    print(f"decoded map {dmap.shape[1]}x{dmap.shape[0]}: {n_valid} valid pixels -> {args.out_path}")
    return EXIT_OK


def _cmd_blobs(args) -> int:
    bench = pipeline.load_bench(args.config)
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    scans = pipeline.PgmScanSeries(pipeline.scan_paths(args.scans_dir, stack.frame_count))
    white = scans[stack.white_index]
    blobs, assignments = pipeline.stage_blobs(bench, white, args.out_csv)
    n_assigned = sum(len(a) for a in assignments.values())
    print(f"{len(blobs)} blobs, {n_assigned} assigned to pinholes -> {args.out_csv}")
    return EXIT_OK


def _cmd_chief(args) -> int:
    bench = pipeline.load_bench(args.config)
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    scans = pipeline.PgmScanSeries(pipeline.scan_paths(args.scans_dir, stack.frame_count))
    white = scans[stack.white_index]
    dmap = formats.read_decoded_map(
        args.decoded_map, proj_width=bench.projector.width, proj_height=bench.projector.height
    )
    blobs, assignments = pipeline.detect_blob_grid(bench, white)
    samples = pipeline.stage_chief(bench, blobs, assignments, dmap, args.out_csv, naive=args.naive_chief, white_scan=white)
    ok = sum(1 for s in samples if s.status == "ok")
    print(f"{ok}/{len(samples)} chief-ray samples ok -> {args.out_csv}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    bench = pipeline.load_bench(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def lookup(mask_id, row, col):
        mask = bench.masks[mask_id]
        local_mm = (col * mask.pitch_mm, row * mask.pitch_mm)
        world = mask.frame.to_world(np.asarray(local_mm))
        return tuple(world), local_mm

    samples = formats.read_chief_samples(args.chief_csv, pinhole_lookup=lookup)
    result = pipeline.stage_calibrate(
        bench,
        samples,
        out_dir / "report.json",
        out_dir / "error_curve.csv",
        out_dir / "error_curve.svg",
        out_dir / "summary.csv",
        max_exclusion=args.max_exclusion,
    )
    k = result.intrinsics
    print(
        f"fx={k.fx:.4f} fy={k.fy:.4f} cx={k.cx:.4f} cy={k.cy:.4f} "
        f"mrpe={result.mrpe_projector:.4f} px excluded={len(result.excluded)}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    bench = pipeline.load_bench(args.config)
    if args.manifest:
        manifest = pipeline.Manifest.load(args.manifest)
        manifest.verify("calibrate")
    result = formats.read_report(args.report)
    if args.target_pose:
        board = pipeline.BoardSpec.from_json_dict(json.loads(Path(args.target_pose).read_text()))
    else:
        board = pipeline.default_board()
    errors = pipeline.stage_eval(bench, result, board, args.out_csv)
    print(f"mean corner-dot error {errors.mean():.4f} mm (std {errors.std():.4f}) -> {args.out_csv}")
    return EXIT_OK


def _cmd_run(args) -> int:
    out = pipeline.run_all(
        args.config,
        args.out_dir,
        noise_sigma_px=args.noise_sigma,
        naive_chief=args.naive_chief,
        max_exclusion=args.max_exclusion,
        seed=args.seed,
        samples_per_pixel=args.samples,
    )
    result = out["result"]
    k = result.intrinsics
    print(f"report: {out['report_path']}")
    print(
        f"fx={k.fx:.4f} fy={k.fy:.4f} cx={k.cx:.4f} cy={k.cy:.4f} "
        f"mrpe_projector={result.mrpe_projector:.4f} px "
        f"mrpe_scanner={result.mrpe_scanner:.4f} px excluded={len(result.excluded)}"
    )
    print(f"mean dot error on the 1 m board: {out['eval_errors'].mean():.4f} mm")
    return EXIT_OK


_COMMANDS = {
    "bench": _cmd_bench,
    "patterns": _cmd_patterns,
    "simulate": _cmd_simulate,
    "decode": _cmd_decode,
    "blobs": _cmd_blobs,
    "chief": _cmd_chief,
    "calibrate": _cmd_calibrate,
    "eval": _cmd_eval,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except BenchValidationError as exc:
        print(f"validation error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PipelineStageError as exc:
        print(f"stage error [{exc.stage}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ChiefRayError as exc:
        print(f"pipeline error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
