import numpy as np
import pytest
from conftest import small_bench

from chiefray.blobs import (
    Blob,
    check_blob_overlap,
    cluster_masks,
    fit_ellipse,
    moore_boundary,
    otsu_threshold,
    recognize_grid,
    segment_blobs,
)
from chiefray.errors import (
    EmptyFieldError,
    GridNotFoundError,
    NotAnEllipseError,
    OverClusteredError,
)
from chiefray.simulate import ScanImage


def disc_image(cx=40.3, cy=35.7, r=12.0, shape=(80, 90), level=100.0):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    img = np.where((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r, level, 0.0)
    return ScanImage(img.astype(np.float32))


def blob_from_mask(mask, blob_id=0):
    ys, xs = np.nonzero(mask)
    return Blob(
        blob_id=blob_id,
        xs=xs.astype(np.int32),
        ys=ys.astype(np.int32),
        area=len(xs),
        centroid=np.array([xs.mean(), ys.mean()]),
    )


class TestSegmentBlobs:
    def test_single_disc(self):
        blobs = segment_blobs(disc_image())
        assert len(blobs) == 1
        assert np.allclose(blobs[0].centroid, [40.3, 35.7], atol=0.1)

    def test_all_black_is_empty_field(self):
        with pytest.raises(EmptyFieldError):
            segment_blobs(ScanImage(np.zeros((40, 40), np.float32)))

    def test_min_area_filter(self):
        img = disc_image().data.copy()
        img[5, 5] = 100.0  # single bright pixel
        blobs = segment_blobs(ScanImage(img), min_blob_area=20)
        assert len(blobs) == 1

    def test_detects_most_visible_pinholes(self, small_dataset, small_detection):
        blobs, _ = small_detection
        gt = small_dataset.ground_truth()
        vis = gt.table.visible
        from scipy.spatial import cKDTree

        tree = cKDTree(np.array([b.centroid for b in blobs]))
        d, _ = tree.query(gt.table.scan_raster[vis])
        detected = (d < 3.0).mean()
        assert len(blobs) <= 2 * 19 * 24
        assert detected >= 0.80

    def test_otsu_bimodal(self):
        rng = np.random.default_rng(1)
        vals = np.concatenate([rng.normal(10, 1, 4000), rng.normal(50, 2, 1000)])
        thr = otsu_threshold(vals)
        assert 15 < thr < 45


class TestMooreBoundary:
    def test_square(self):
        mask = np.zeros((8, 8), bool)
        mask[2:6, 3:7] = True
        pts = moore_boundary(mask)
        # 4x4 square has 12 boundary pixels
        assert len(np.unique(pts, axis=0)) == 12
        assert pts.min() >= 2

    def test_single_pixel(self):
        mask = np.zeros((4, 4), bool)
        mask[1, 2] = True
        assert np.array_equal(moore_boundary(mask), [[2, 1]])


class TestFitEllipse:
    def rasterized(self, a, b, theta, center=(101.3, 99.2)):
        yy, xx = np.mgrid[0:200, 0:200]
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - center[0], yy - center[1]
        xr = dx * ct + dy * st
        yr = -dx * st + dy * ct
        return blob_from_mask((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)

    def test_recovers_axes_within_half_percent(self):
        e = fit_ellipse(self.rasterized(30.0, 18.0, 0.6))
        assert abs(e.a - 30.0) / 30.0 < 0.005
        assert abs(e.b - 18.0) / 18.0 < 0.005
        assert abs(e.theta - 0.6) < 0.01
        assert np.allclose(e.center, [101.3, 99.2], atol=0.1)

    def test_circle_orientation_unconstrained(self):
        e = fit_ellipse(self.rasterized(25.0, 25.0, 0.0))
        assert abs(e.a - e.b) / e.a < 0.005
        assert 0.0 <= e.theta < np.pi  # any orientation accepted

    def test_tiny_blob_rejected(self):
        mask = np.zeros((10, 10), bool)
        mask[4, 4:9] = True  # 5 pixels
        with pytest.raises(NotAnEllipseError):
            fit_ellipse(blob_from_mask(mask))


class TestClusterMasks:
    def grid_blobs(self, origin, n=12, step=10.0, start_id=0):
        out = []
        for i in range(n):
            c = np.array([origin[0] + (i % 4) * step, origin[1] + (i // 4) * step])
            out.append(Blob(blob_id=start_id + i, xs=np.zeros(1, np.int32), ys=np.zeros(1, np.int32), area=30, centroid=c))
        return out

    def test_two_separated_grids(self):
        blobs = self.grid_blobs((0, 0)) + self.grid_blobs((200, 0), start_id=12)
        labels = cluster_masks(blobs, 2)
        assert len(set(labels[:12])) == 1
        assert len(set(labels[12:])) == 1
        assert labels[0] != labels[12]

    def test_k_equals_one(self):
        blobs = self.grid_blobs((0, 0))
        assert set(cluster_masks(blobs, 1)) == {0}

    def test_over_clustered(self):
        with pytest.raises(OverClusteredError):
            cluster_masks(self.grid_blobs((0, 0), n=3), 4)

    def test_duplicate_points_deterministic(self):
        blobs = self.grid_blobs((0, 0), n=4, step=0.0)  # all identical centroids
        l1 = cluster_masks(blobs, 2)
        l2 = cluster_masks(blobs, 2)
        assert np.array_equal(l1, l2)


class TestRecognizeGrid:
    def projective_grid(self, rows=8, cols=10, drop=(), spurious=0, seed=0):
        # perspective-like foreshortening plus mild jitter
        rng = np.random.default_rng(seed)
        blobs, truth = [], {}
        bid = 0
        for r in range(rows):
            for c in range(cols):
                if (r, c) in drop:
                    continue
                scale = 1.0 + 0.04 * r
                x = 40.0 + c * 20.0 * scale + rng.normal(0, 0.2)
                y = 30.0 + r * 18.0 * scale + rng.normal(0, 0.2)
                blobs.append(Blob(bid, np.zeros(1, np.int32), np.zeros(1, np.int32), 40, np.array([x, y])))
                truth[bid] = (r, c)
                bid += 1
        for _ in range(spurious):
            blobs.append(Blob(bid, np.zeros(1, np.int32), np.zeros(1, np.int32), 40, rng.uniform(250, 400, 2)))
            bid += 1
        return blobs, truth

    def mask(self, rows=19, cols=24):
        from conftest import plane

        from chiefray.simulate import PinholeMask

        return PinholeMask(rows=rows, cols=cols, pitch_mm=5.0, hole_diameter_mm=0.3,
                           frame=plane([0, 0, 250.0], extent=(130.0, 108.0)))

    def assert_consistent(self, asg, truth):
        # indices must match the truth up to one global lattice shift
        deltas = set()
        for i, bid in enumerate(asg.blob_ids):
            r, c = truth[int(bid)]
            deltas.add((int(asg.row[i]) - r, int(asg.col[i]) - c))
        assert len(deltas) == 1

    def test_complete_grid(self):
        blobs, truth = self.projective_grid()
        asg = recognize_grid(blobs, self.mask())
        assert len(asg) == len(blobs)
        self.assert_consistent(asg, truth)

    def test_ten_percent_deleted(self):
        rng = np.random.default_rng(7)
        cells = [(r, c) for r in range(8) for c in range(10)]
        drop = {cells[i] for i in rng.choice(len(cells), 8, replace=False)}
        blobs, truth = self.projective_grid(drop=drop)
        asg = recognize_grid(blobs, self.mask())
        assert len(asg) >= len(blobs) - 2
        self.assert_consistent(asg, truth)

    def test_spurious_blobs_dropped(self):
        blobs, truth = self.projective_grid(spurious=6)
        asg = recognize_grid(blobs, self.mask())
        assigned = set(int(b) for b in asg.blob_ids)
        assert all(bid in truth for bid in assigned)
        self.assert_consistent(asg, truth)

    def test_collinear_fails(self):
        blobs = [
            Blob(i, np.zeros(1, np.int32), np.zeros(1, np.int32), 40, np.array([10.0 * i, 5.0 * i]))
            for i in range(3)
        ]
        with pytest.raises(GridNotFoundError):
            recognize_grid(blobs, self.mask())

    def test_grid_consistency_invariant(self, small_dataset, small_detection):
        # neighbouring assigned blobs differ by the local basis within 15%
        blobs, assignments = small_detection
        by_id = {b.blob_id: b for b in blobs}
        for asg in assignments.values():
            pos = {(int(asg.row[i]), int(asg.col[i])): by_id[int(b)].centroid for i, b in enumerate(asg.blob_ids)}
            bad = total = 0
            for (r, c), p in pos.items():
                for dr, dc in ((0, 1), (1, 0)):
                    q = pos.get((r + dr, c + dc))
                    far = pos.get((r - dr, c - dc))
                    if q is None or far is None:
                        continue
                    step = (q - far) / 2.0  # local basis estimate
                    total += 1
                    if np.linalg.norm((q - p) - step) > 0.15 * np.linalg.norm(step):
                        bad += 1
            assert total > 50
            assert bad / total < 0.05


class TestOverlapGuard:
    def test_disjoint_grids_pass(self, small_detection):
        blobs, _ = small_detection
        check_blob_overlap(blobs)

    def test_colliding_ellipses_raise(self):
        from chiefray.blobs import EllipseParams
        from chiefray.errors import OverlappingBlobsError

        blobs = []
        for i, cx in enumerate((50.0, 60.0)):
            b = Blob(i, np.zeros(1, np.int32), np.zeros(1, np.int32), 100, np.array([cx, 50.0]))
            b.ellipse = EllipseParams(center=(cx, 50.0), a=10.0, b=8.0, theta=0.0, residual=0.0)
            blobs.append(b)
        with pytest.raises(OverlappingBlobsError):
            check_blob_overlap(blobs)
