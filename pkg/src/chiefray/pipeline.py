"""Pipeline stages and artifact management for the CLI driver.

Stages chain simulate -> decode -> segment -> extract -> calibrate ->
evaluate, each reading and writing inspectable artifacts in the output
directory. A manifest records SHA-256 checksums per stage so downstream
stages can detect stale inputs; timestamps live only in the manifest, never
inside data files, which keeps reruns byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .blobs import Blob, check_blob_overlap, cluster_masks, recognize_grid, segment_blobs
from .calibrate import (
    ProjectorCalibrator,
    build_views,
    solve_pnp,
    evaluate_projection,
)
from .chief import ChiefRaySample, PinholeRef, extract_chief, naive_center
from .errors import ChiefRayError, MissingCodeError, PipelineStageError
from .geometry import PlaneFrame, RigidPose, project, rotation_from_euler_deg
from .graycode import decode_stack, generate_patterns
from .simulate import (
    BenchConfig,
    ScanImage,
    SynthDataset,
    ground_truth_intrinsics,
    synth_dataset,
)

logger = logging.getLogger(__name__)

WHITE_QUANT_LEVEL = 60000.0  # white frame peak after 16-bit quantization


def thread_count() -> int:
    """Worker cap for stage-internal parallelism, from CHIEFRAY_THREADS."""
    env = os.environ.get("CHIEFRAY_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer CHIEFRAY_THREADS=%r", env)
    return min(4, os.cpu_count() or 1)


def load_bench(path) -> BenchConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    bench = BenchConfig.from_json_dict(data)
    bench.validate()
    return bench


def save_bench(path, bench: BenchConfig) -> None:
    Path(path).write_text(
        json.dumps(bench.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="ascii"
    )


@dataclass(frozen=True)
class BoardSpec:
    """Planar checker target for pose-based evaluation.

    Corner (row, col) sits at board-local
    ``((col - (cols-1)/2) * spacing, (row - (rows-1)/2) * spacing)``; the four
    corners of the top-left 2x2 block anchor the pose estimation.
    """

    rows: int = 6
    cols: int = 9
    spacing_mm: float = 40.0
    frame: PlaneFrame = None  # type: ignore[assignment]

    def corners(self) -> np.ndarray:
        r = np.arange(self.rows)
        c = np.arange(self.cols)
        cc, rr = np.meshgrid(c, r)
        local = np.column_stack(
            [
                (cc.ravel() - (self.cols - 1) / 2.0) * self.spacing_mm,
                (rr.ravel() - (self.rows - 1) / 2.0) * self.spacing_mm,
            ]
        )
        return self.frame.to_world(local)

    def anchor_indices(self) -> np.ndarray:
        idx = [r * self.cols + c for r in (0, 1) for c in (0, 1)]
        return np.array(idx)

    @classmethod
    def from_json_dict(cls, d: dict) -> "BoardSpec":
        rows = int(d.get("rows", 6))
        cols = int(d.get("cols", 9))
        spacing = float(d.get("spacing_mm", 40.0))
        frame = PlaneFrame(
            pose=RigidPose(
                rotation_from_euler_deg(
                    yaw=float(d.get("yaw_deg", 0.0)),
                    pitch=float(d.get("pitch_deg", 0.0)),
                    roll=float(d.get("roll_deg", 0.0)),
                ),
                np.asarray(d["center_mm"], dtype=float),
            ),
            extent=(cols * spacing, rows * spacing),
        )
        return cls(rows=rows, cols=cols, spacing_mm=spacing, frame=frame)


def default_board(distance_mm: float = 1000.0) -> BoardSpec:
    """A 6x9 corner grid one metre out, centred in the projection cone."""
    return BoardSpec.from_json_dict({"center_mm": [0.0, -110.0 * distance_mm / 1000.0, distance_mm]})


class Manifest:
    """Stage bookkeeping: artifact checksums plus run metadata."""

    def __init__(self, data: dict | None = None):
        self.data = data or {"stages": {}, "meta": {}}

    def record(self, stage: str, outputs: dict) -> None:
        self.data["stages"][stage] = {
            "outputs": {name: {"path": str(p), "sha256": formats.sha256_file(p)} for name, p in outputs.items()}
        }

    def verify(self, stage: str) -> None:
        entry = self.data["stages"].get(stage)
        if entry is None:
            raise PipelineStageError(stage, "no manifest entry for upstream stage")
        for name, rec in entry["outputs"].items():
            path = rec["path"]
            if not Path(path).exists():
                raise PipelineStageError(stage, f"stale checksum: {name} missing at {path}")
            if formats.sha256_file(path) != rec["sha256"]:
                raise PipelineStageError(stage, f"stale checksum: {name} changed at {path}")

    def save(self, path) -> None:
        self.data["meta"]["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls(json.loads(Path(path).read_text(encoding="ascii")))


class PgmScanSeries:
    """Lazy sequence of scans backed by PGM files."""

    def __init__(self, paths: list):
        self.paths = [Path(p) for p in paths]

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> ScanImage:
        return ScanImage(formats.read_pgm(self.paths[i]).astype(np.float32))


def scan_paths(scans_dir, count: int) -> list:
    return [Path(scans_dir) / f"scan_{i:03d}.pgm" for i in range(count)]


# ----------------------------------------------------------------------------
# stages


def stage_patterns(bench: BenchConfig, out_dir) -> list:
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(stack.frames):
        path = out_dir / f"pattern_{i:03d}.pgm"
        formats.write_pgm(path, frame.astype(np.uint8) * np.uint8(255))
        paths.append(path)
    return paths


def stage_simulate(
    bench: BenchConfig,
    out_dir,
    noise_sigma_px: float = 0.0,
    samples_per_pixel: int | None = None,
) -> dict:
    """Render the full stack to 16-bit PGMs plus the ground-truth table."""
    out_dir = Path(out_dir)
    scans_dir = out_dir / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(bench, noise_sigma_px=noise_sigma_px, samples_per_pixel=samples_per_pixel)
    white = ds.sim.render(ds.stack.frames[ds.stack.white_index]).data
    peak = float(white.max())
    scale = WHITE_QUANT_LEVEL / peak if peak > 0 else 1.0
    paths = scan_paths(scans_dir, ds.frame_count)

    def render_one(i: int) -> np.ndarray:
        return formats.quantize_u16(ds.scan(i).data, scale)

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for path, img in zip(paths, pool.map(render_one, range(ds.frame_count))):
                formats.write_pgm(path, img)
    else:
        for i, path in enumerate(paths):
            formats.write_pgm(path, render_one(i))

    gt = ds.ground_truth()
    table = gt.table
    rows = []
    for i in range(len(table)):
        if not table.visible[i]:
            continue
        rows.append(
            (
                formats.pinhole_id(table.row[i], table.col[i]),
                int(table.mask_id[i]),
                float(table.chief_px[i, 0]),
                float(table.chief_px[i, 1]),
                float(table.scan_local_mm[i, 0]),
                float(table.scan_local_mm[i, 1]),
            )
        )
    gt_path = out_dir / "gt_chief_table.csv"
    formats.write_csv(gt_path, formats.GT_TABLE_HEADER, rows)
    return {"scans": paths, "gt_table": gt_path, "dataset": ds, "scale": scale}


def stage_decode(bench: BenchConfig, scans, out_path) -> "formats.DecodedMap":
    stack = generate_patterns(bench.projector.width, bench.projector.height)
    dmap = decode_stack(
        scans,
        stack,
        contrast_threshold=bench.decode_contrast_threshold,
        bit_threshold=bench.decode_bit_threshold,
    )
    formats.write_decoded_map(out_path, dmap)
    return dmap


def detect_blob_grid(bench: BenchConfig, white_scan) -> tuple[list, dict]:
    """Segment the white scan and recognize per-mask pinhole grids.

    Returns the blob list and a dict mask_id -> PinholeGridAssignment.
    Cluster labels map to physical masks by matching cluster centres against
    each mask's predicted blob-field centre (the grid-centre chief ray).
    """
    blobs = segment_blobs(white_scan)
    check_blob_overlap(blobs)
    k = max(1, len(bench.masks))
    labels = cluster_masks(blobs, k)
    raster = bench.scanner_raster()
    predicted = []
    for mask in bench.masks:
        center_world = mask.frame.to_world(np.zeros(2))
        hit = bench.scanner_frame.intersect_ray(np.zeros(3), center_world / np.linalg.norm(center_world))
        if hit is None:
            predicted.append(np.array([np.nan, np.nan]))
        else:
            predicted.append(raster.local_to_raster(hit[1]))
    cluster_centers = np.array(
        [np.mean([blobs[i].centroid for i in np.flatnonzero(labels == c)], axis=0) for c in range(k)]
    )
    # small k: exhaustive assignment of clusters to masks by total distance
    from itertools import permutations

    best_perm, best_cost = None, np.inf
    for perm in permutations(range(k)):
        cost = 0.0
        for mask_i in range(len(bench.masks)):
            if mask_i < k and np.all(np.isfinite(predicted[mask_i])):
                cost += float(np.linalg.norm(cluster_centers[perm[mask_i]] - predicted[mask_i]))
        if cost < best_cost:
            best_cost, best_perm = cost, perm
    assignments = {}
    for mask_i, mask in enumerate(bench.masks):
        cluster = best_perm[mask_i] if best_perm is not None else mask_i
        members = [blobs[i] for i in np.flatnonzero(labels == cluster)]
        assignments[mask_i] = recognize_grid(members, mask, mask_id=mask_i)
    return blobs, assignments


def stage_blobs(bench: BenchConfig, white_scan, out_csv) -> tuple[list, dict]:
    blobs, assignments = detect_blob_grid(bench, white_scan)
    assigned = {}
    for mask_id, asg in assignments.items():
        for i, bid in enumerate(asg.blob_ids):
            assigned[int(bid)] = (mask_id, int(asg.row[i]), int(asg.col[i]))
    rows = []
    for b in blobs:
        mask_id, row, col = assigned.get(b.blob_id, (-1, -1, -1))
        e = b.ellipse
        rows.append(
            (
                b.blob_id,
                mask_id,
                row,
                col,
                float(b.centroid[0]),
                float(b.centroid[1]),
                b.area,
                float(e.a) if e else -1.0,
                float(e.b) if e else -1.0,
                float(e.theta) if e else -1.0,
                float(e.residual) if e else -1.0,
            )
        )
    formats.write_csv(out_csv, formats.BLOB_TABLE_HEADER, rows)
    return blobs, assignments


def extract_samples(
    bench: BenchConfig,
    blobs: list,
    assignments: dict,
    dmap,
    naive: bool = False,
    white_scan=None,
) -> list:
    """Chief-ray samples (or the ellipse-centre baseline) for assigned blobs."""
    raster = bench.scanner_raster()
    energy = None if white_scan is None else np.asarray(getattr(white_scan, "data", white_scan), dtype=float)
    by_id = {b.blob_id: b for b in blobs}
    samples = []
    for mask_id in sorted(assignments):
        asg = assignments[mask_id]
        for i, bid in enumerate(asg.blob_ids):
            pin = PinholeRef(
                mask_id=mask_id,
                row=int(asg.row[i]),
                col=int(asg.col[i]),
                world=tuple(float(x) for x in asg.world[i]),
                local_mm=tuple(float(x) for x in asg.local_mm[i]),
            )
            blob = by_id[int(bid)]
            try:
                if naive:
                    samples.append(naive_center(blob, dmap, raster, pinhole=pin))
                else:
                    samples.append(extract_chief(blob, dmap, raster, pinhole=pin, energy_image=energy))
            except ChiefRayError as exc:
                logger.debug("blob %d: %s", bid, exc)
                samples.append(
                    ChiefRaySample(
                        pinhole=pin,
                        chief_px=np.array([-1.0, -1.0]),
                        scanner_raster=np.array([np.nan, np.nan]),
                        scanner_world=np.zeros(3),
                        residual=-1.0,
                        status="missing-code",
                        blob_id=int(bid),
                    )
                )
    return samples


def stage_chief(bench, blobs, assignments, dmap, out_csv, naive: bool = False, white_scan=None) -> list:
    samples = extract_samples(bench, blobs, assignments, dmap, naive=naive, white_scan=white_scan)
    formats.write_chief_samples(out_csv, samples)
    return samples


def stage_calibrate(
    bench: BenchConfig,
    samples,
    report_path,
    curve_csv,
    curve_svg,
    summary_path=None,
    max_exclusion: float = 0.10,
):
    views, sets = build_views(
        samples, bench.scanner_frame, expected_planes=len(bench.masks) + 1
    )
    pitch = 25.4 / bench.scanner_dpi
    calib = ProjectorCalibrator(
        max_exclusion_fraction=max_exclusion,
        scan_pixel_pitch_mm=pitch,
        expected_planes=len(bench.masks) + 1,
    ).fit(sets)
    result = calib.result_
    formats.write_report(report_path, result)
    formats.write_error_curve_csv(curve_csv, result.error_curve)
    formats.write_error_curve_svg(curve_svg, result.error_curve)
    if summary_path is not None:
        k = result.intrinsics
        lines = [
            "parameter,value",
            f"fx,{k.fx!r}",
            f"fy,{k.fy!r}",
            f"cx,{k.cx!r}",
            f"cy,{k.cy!r}",
            f"mrpe_projector_px,{result.mrpe_projector!r}",
            f"mrpe_scanner_px,{result.mrpe_scanner!r}",
            f"excluded_sets,{len(result.excluded)}",
        ]
        Path(summary_path).write_text("\n".join(lines) + "\n", encoding="ascii")
    return result


def stage_eval(bench: BenchConfig, result, board: BoardSpec, out_csv) -> np.ndarray:
    """Dot-placement evaluation against a known planar target."""
    K_true = ground_truth_intrinsics(bench.projector)
    pose_true = RigidPose.identity()
    corners = board.corners()
    anchors = board.anchor_indices()
    others = np.setdiff1d(np.arange(len(corners)), anchors)
    anchor_px = np.array([project(K_true, pose_true, c) for c in corners[anchors]])
    est = solve_pnp(corners[anchors], anchor_px, result.intrinsics)
    errors = evaluate_projection(
        result.intrinsics, est, corners[others], K_true, pose_true, target_frame=board.frame
    )
    rows = [(int(others[i]), float(errors[i])) for i in range(len(others))]
    rows.append(("mean", float(errors.mean())))
    rows.append(("stddev", float(errors.std())))
    formats.write_csv(out_csv, ["corner_id", "err_mm"], rows)
    return errors


# ----------------------------------------------------------------------------
# full pipeline


def run_all(
    config_path,
    out_dir,
    noise_sigma_px: float = 0.0,
    naive_chief: bool = False,
    max_exclusion: float = 0.10,
    seed: int | None = None,
    samples_per_pixel: int | None = None,
    board: BoardSpec | None = None,
) -> dict:
    """Run the whole pipeline into ``out_dir`` and return stage summaries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest()

    def run_stage(name, fn):
        try:
            return fn()
        except ChiefRayError as exc:
            if isinstance(exc, PipelineStageError):
                raise
            raise PipelineStageError(name, str(exc)) from exc

    bench = run_stage("bench", lambda: load_bench(config_path))
    if seed is not None:
        bench = dataclasses.replace(bench, rng_seed=int(seed))
    bench_path = out_dir / "bench.json"
    save_bench(bench_path, bench)
    manifest.record("bench", {"bench": bench_path})

    pattern_paths = run_stage("patterns", lambda: stage_patterns(bench, out_dir / "patterns"))
    manifest.record("patterns", {f"pattern_{i:03d}": p for i, p in enumerate(pattern_paths)})

    sim_out = run_stage(
        "simulate",
        lambda: stage_simulate(
            bench, out_dir, noise_sigma_px=noise_sigma_px, samples_per_pixel=samples_per_pixel
        ),
    )
    manifest.record(
        "simulate",
        {"gt_table": sim_out["gt_table"], **{f"scan_{i:03d}": p for i, p in enumerate(sim_out["scans"])}},
    )

    dmap_path = out_dir / "decoded.dmap"
    scans = PgmScanSeries(sim_out["scans"])
    dmap = run_stage("decode", lambda: stage_decode(bench, scans, dmap_path))
    manifest.record("decode", {"decoded": dmap_path})

    white = scans[len(scans) - 2]
    blobs_csv = out_dir / "blobs.csv"
    blobs, assignments = run_stage("blobs", lambda: stage_blobs(bench, white, blobs_csv))
    manifest.record("blobs", {"blobs": blobs_csv})

    chief_csv = out_dir / "chief.csv"
    samples = run_stage(
        "chief",
        lambda: stage_chief(bench, blobs, assignments, dmap, chief_csv, naive=naive_chief, white_scan=white),
    )
    manifest.record("chief", {"chief": chief_csv})

    report_path = out_dir / "report.json"
    curve_csv = out_dir / "error_curve.csv"
    curve_svg = out_dir / "error_curve.svg"
    summary = out_dir / "summary.csv"
    result = run_stage(
        "calibrate",
        lambda: stage_calibrate(
            bench, samples, report_path, curve_csv, curve_svg, summary, max_exclusion=max_exclusion
        ),
    )
    manifest.record(
        "calibrate",
        {"report": report_path, "error_curve": curve_csv, "error_curve_svg": curve_svg, "summary": summary},
    )

    eval_csv = out_dir / "eval.csv"
    eval_board = board or default_board()
    errors = run_stage("eval", lambda: stage_eval(bench, result, eval_board, eval_csv))
    manifest.record("eval", {"eval": eval_csv})

    manifest.save(out_dir / "manifest.json")
    return {
        "bench": bench,
        "result": result,
        "eval_errors": errors,
        "report_path": report_path,
        "manifest": manifest,
        "out_dir": out_dir,
    }


def calibrate_dataset(
    ds: SynthDataset,
    naive_chief: bool = False,
    max_exclusion: float = 0.10,
):
    """In-memory convenience path: dataset -> decoded map -> samples -> result."""
    bench = ds.bench
    stack = ds.stack
    dmap = decode_stack(
        ds.scans,
        stack,
        contrast_threshold=bench.decode_contrast_threshold,
        bit_threshold=bench.decode_bit_threshold,
    )
    white = ds.white_scan()
    blobs, assignments = detect_blob_grid(bench, white)
    samples = extract_samples(bench, blobs, assignments, dmap, naive=naive_chief, white_scan=white)
    views, sets = build_views(samples, bench.scanner_frame, expected_planes=len(bench.masks) + 1)
    pitch = 25.4 / bench.scanner_dpi
    calib = ProjectorCalibrator(
        max_exclusion_fraction=max_exclusion,
        scan_pixel_pitch_mm=pitch,
        expected_planes=len(bench.masks) + 1,
    ).fit(sets)
    return {
        "dmap": dmap,
        "blobs": blobs,
        "assignments": assignments,
        "samples": samples,
        "sets": sets,
        "views": views,
        "result": calib.result_,
    }
