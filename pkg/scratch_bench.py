# scratch tuning script (not shipped): build benches, inspect stats
import time

import numpy as np

from chiefray.geometry import PlaneFrame, RigidPose, rotation_from_euler_deg
from chiefray.simulate import (
    BenchConfig,
    PinholeMask,
    ProjectorModel,
    Simulator,
    ground_truth_intrinsics,
    synth_dataset,
)


def frame(center, yaw=0.0, pitch=0.0, roll=0.0, extent=(100.0, 100.0)):
    return PlaneFrame(
        pose=RigidPose(rotation_from_euler_deg(yaw=yaw, pitch=pitch, roll=roll), np.asarray(center, float)),
        extent=extent,
    )


def make_bench(width=800, height=600, pixel_pitch=0.0112, dpi=200.0, seed=7, samples=256,
               scanner_pitch=45.0, aperture=7.0, thickness=0.0, rows=19, cols=24):
    proj = ProjectorModel(
        width=width,
        height=height,
        pixel_pitch_mm=pixel_pitch,
        image_plane_offset_mm=(0.056, 2.24),
        lens_focal_length_mm=20.0,
        aperture_diameter_mm=aperture,
        focus_distance_mm=1000.0,
    )
    masks = (
        PinholeMask(rows=rows, cols=cols, pitch_mm=5.0, hole_diameter_mm=0.3, thickness_mm=thickness,
                    frame=frame([-60.5, -27.4, 248.0], yaw=20.0, extent=(130.0, 108.0))),
        PinholeMask(rows=rows, cols=cols, pitch_mm=5.0, hole_diameter_mm=0.3, thickness_mm=thickness,
                    frame=frame([60.5, -27.4, 252.0], yaw=-20.0, extent=(130.0, 108.0))),
    )
    scanner = frame([0.0, -39.1, 459.9], pitch=scanner_pitch, extent=(260.0, 250.0))
    return BenchConfig(
        projector=proj, masks=masks, scanner_frame=scanner, scanner_dpi=dpi,
        rng_seed=seed, rays_per_pixel_sample=samples,
        decode_contrast_threshold=0.02,
    )


def small_bench(**kw):
    kw.setdefault("width", 128)
    kw.setdefault("height", 96)
    kw.setdefault("pixel_pitch", 0.07)
    kw.setdefault("dpi", 50.0)
    kw.setdefault("samples", 256)
    return make_bench(**kw)


def default_bench(**kw):
    return make_bench(**kw)


if __name__ == "__main__":
    import sys

    which = sys.argv[1] if len(sys.argv) > 1 else "small"
    bench = small_bench() if which == "small" else default_bench(samples=128)
    t0 = time.time()
    sim = Simulator(bench)
    K = sim.intrinsics
    print(f"gt intrinsics: fx={K.fx:.3f} cx={K.cx:.3f} cy={K.cy:.3f}")
    gt = sim.ground_truth()
    t1 = time.time()
    print(f"transport: {len(sim.transport['scan'])} entries in {t1 - t0:.1f}s")
    vis = gt.table.visible
    print(f"visible pinholes: {int(vis.sum())}/{len(vis)} "
          f"(mask0 {int(vis[gt.table.mask_id == 0].sum())}, mask1 {int(vis[gt.table.mask_id == 1].sum())})")
    sr = gt.table.scan_raster[vis]
    print(f"scan raster range: x [{np.nanmin(sr[:,0]):.0f}, {np.nanmax(sr[:,0]):.0f}] of {sim.raster.width_px}, "
          f"y [{np.nanmin(sr[:,1]):.0f}, {np.nanmax(sr[:,1]):.0f}] of {sim.raster.height_px}")
    white = sim.render(np.ones((bench.projector.height, bench.projector.width), bool))
    t2 = time.time()
    print(f"white render {t2 - t1:.2f}s, max {white.data.max():.4g}, nonzero px {int((white.data > 0).sum())}")

    from chiefray.blobs import segment_blobs, cluster_masks, check_blob_overlap
    blobs = segment_blobs(white)
    print(f"blobs: {len(blobs)}, median area {np.median([b.area for b in blobs]):.0f}, "
          f"areas [{min(b.area for b in blobs)}, {max(b.area for b in blobs)}]")
    try:
        check_blob_overlap(blobs)
        print("no overlap")
    except Exception as e:
        print("OVERLAP:", e)
    from scipy.spatial import cKDTree
    cents = np.array([b.centroid for b in blobs])
    tree = cKDTree(cents)
    d, idx = tree.query(sr)
    print(f"gt->blob matching: median dist {np.median(d):.2f} px, within 3px: {(d < 3).mean():.2%}, "
          f"detected fraction of visible: {(d < 3).sum()}/{len(sr)}")
