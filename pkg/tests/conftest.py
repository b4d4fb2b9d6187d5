"""Shared bench builders and session-scoped datasets for the test suite."""

import numpy as np
import pytest

from chiefray.geometry import PlaneFrame, RigidPose, rotation_from_euler_deg
from chiefray.simulate import BenchConfig, PinholeMask, ProjectorModel, synth_dataset


def plane(center, yaw=0.0, pitch=0.0, roll=0.0, extent=(100.0, 100.0)):
    return PlaneFrame(
        pose=RigidPose(rotation_from_euler_deg(yaw=yaw, pitch=pitch, roll=roll), np.asarray(center, float)),
        extent=extent,
    )


def make_bench(
    width=800,
    height=600,
    pixel_pitch=0.0112,
    dpi=200.0,
    seed=7,
    samples=256,
    scanner_pitch=45.0,
    aperture=7.0,
    thickness=0.0,
    rows=19,
    cols=24,
    contrast=0.02,
):
    """Two-mask bench matching the shipped default geometry.

    The projector panel, scanner dpi, and sampling budget scale down for
    fast tests while the mask/scanner layout stays identical.
    """
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
        PinholeMask(
            rows=rows, cols=cols, pitch_mm=5.0, hole_diameter_mm=0.3, thickness_mm=thickness,
            frame=plane([-60.5, -27.4, 248.0], yaw=20.0, extent=(130.0, 108.0)),
        ),
        PinholeMask(
            rows=rows, cols=cols, pitch_mm=5.0, hole_diameter_mm=0.3, thickness_mm=thickness,
            frame=plane([60.5, -27.4, 252.0], yaw=-20.0, extent=(130.0, 108.0)),
        ),
    )
    scanner = plane([0.0, -39.1, 459.9], pitch=scanner_pitch, extent=(260.0, 250.0))
    return BenchConfig(
        projector=proj,
        masks=masks,
        scanner_frame=scanner,
        scanner_dpi=dpi,
        rng_seed=seed,
        rays_per_pixel_sample=samples,
        decode_contrast_threshold=contrast,
    )


def small_bench(**overrides):
    kw = dict(width=128, height=96, pixel_pitch=0.07, dpi=50.0, samples=256)
    kw.update(overrides)
    return make_bench(**kw)


def medium_bench(**overrides):
    kw = dict(dpi=150.0, samples=64)
    kw.update(overrides)
    return make_bench(**kw)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(small_bench())


@pytest.fixture(scope="session")
def small_decoded(small_dataset):
    from chiefray.graycode import decode_stack

    ds = small_dataset
    return decode_stack(
        ds.scans,
        ds.stack,
        contrast_threshold=ds.bench.decode_contrast_threshold,
        bit_threshold=ds.bench.decode_bit_threshold,
    )


@pytest.fixture(scope="session")
def small_detection(small_dataset):
    from chiefray.pipeline import detect_blob_grid

    return detect_blob_grid(small_dataset.bench, small_dataset.white_scan())
