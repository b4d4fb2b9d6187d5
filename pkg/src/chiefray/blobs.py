"""Light-blob segmentation, mask clustering, pinhole-grid recognition.

The all-white scan is thresholded (Otsu) and split into 4-connected
components. Blobs are grouped per mask by a deterministic k-means, then each
group is matched against a two-vector lattice by RANSAC over centroid
difference vectors, which drops stray blobs and yields integer (row, col)
pinhole indices. Absolute anchoring of the indices is irrelevant to the
downstream planar calibration: any consistent pitch-scaled lattice gives
object coordinates equal to the true ones up to an in-plane isometry, which
the per-view homography absorbs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    EmptyFieldError,
    GridNotFoundError,
    NotAnEllipseError,
    OverClusteredError,
    OverlappingBlobsError,
)
from .simulate import PinholeMask

DEFAULT_MIN_BLOB_AREA = 20

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass(frozen=True)
class EllipseParams:
    """Fitted ellipse: centre, semi-axes a >= b, major-axis angle in [0, pi)."""

    center: tuple[float, float]
    a: float
    b: float
    theta: float
    residual: float

    def support_radius(self, direction_angle: float) -> float:
        """Half-extent of the ellipse along a direction (support function)."""
        d = direction_angle - self.theta
        return math.sqrt((self.a * math.cos(d)) ** 2 + (self.b * math.sin(d)) ** 2)


@dataclass
class Blob:
    """One connected bright component on the scanner raster."""

    blob_id: int
    xs: np.ndarray
    ys: np.ndarray
    area: int
    centroid: np.ndarray  # (x, y), sub-pixel
    ellipse: EllipseParams | None = None

    def bounding_box(self) -> tuple[int, int, int, int]:
        return int(self.xs.min()), int(self.xs.max()), int(self.ys.min()), int(self.ys.max())

    def mask_crop(self) -> tuple[np.ndarray, int, int]:
        """Binary crop of the blob and its (x0, y0) offset."""
        x0, x1, y0, y1 = self.bounding_box()
        crop = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        crop[self.ys - y0, self.xs - x0] = True
        return crop, x0, y0


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold over a value histogram."""
    v = np.asarray(values, dtype=float).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(float) / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    return float(centers[int(np.argmax(sigma_b))])


def _scan_array(scan) -> np.ndarray:
    return np.asarray(getattr(scan, "data", scan), dtype=float)


def segment_blobs(
    white_scan,
    min_blob_area: int = DEFAULT_MIN_BLOB_AREA,
    relative_min_area: float = 0.15,
) -> list[Blob]:
    """Adaptive threshold plus 4-connected components on the all-white scan.

    The Otsu level acts as the strong threshold of a hysteresis pair: support
    grows to half that level around strong pixels, which keeps dim blobs in
    one piece when their interior rides close to the global threshold.
    Components smaller than ``min_blob_area`` are discarded, as is anything
    below ``relative_min_area`` of the median surviving area (skirt crumbs of
    much larger blobs). An empty result raises :class:`EmptyFieldError`; each
    blob gets an ellipse fit when its boundary supports one.
    """
    img = _scan_array(white_scan)
    thr = otsu_threshold(img)
    weak = img > 0.5 * thr
    labels, n = ndimage.label(weak, structure=_FOUR_CONNECTED)
    if n == 0:
        raise EmptyFieldError("no blobs above threshold on the white scan")
    strong = img > thr
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    if len(keep_labels) == 0:
        raise EmptyFieldError("no blobs above threshold on the white scan")
    mask_keep = np.zeros(n + 1, dtype=bool)
    mask_keep[keep_labels] = True
    labels[~mask_keep[labels]] = 0
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    big = areas[1:][areas[1:] >= min_blob_area]
    floor = min_blob_area
    if len(big):
        floor = max(min_blob_area, int(relative_min_area * float(np.median(big))))
    blobs: list[Blob] = []
    for lab in keep_labels:
        if areas[lab] < floor:
            continue
        ys, xs = np.nonzero(labels == lab)
        blob = Blob(
            blob_id=len(blobs),
            xs=xs.astype(np.int32),
            ys=ys.astype(np.int32),
            area=int(areas[lab]),
            centroid=np.array([xs.mean(), ys.mean()]),
        )
        try:
            blob.ellipse = fit_ellipse(blob)
        except NotAnEllipseError:
            blob.ellipse = None
        blobs.append(blob)
    if not blobs:
        raise EmptyFieldError(f"all components below min_blob_area={min_blob_area}")
    return blobs


def moore_boundary(mask: np.ndarray) -> np.ndarray:
    """Ordered outer boundary of a connected binary component (x, y) pixels.

    Moore neighbour tracing with Jacob's stopping criterion; the component
    must be non-empty and 4-connected.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty component")
    if len(xs) == 1:
        return np.array([[xs[0], ys[0]]])
    order = np.lexsort((xs, ys))
    sy, sx = int(ys[order[0]]), int(xs[order[0]])
    # clockwise 8-neighbourhood starting west: W NW N NE E SE S SW
    offs = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
    h, w = mask.shape

    def fg(y, x):
        return 0 <= y < h and 0 <= x < w and mask[y, x]

    boundary = [(sx, sy)]
    backtrack = 0  # direction from current pixel to the background cell we came from (west)
    cy, cx = sy, sx
    start_state = None
    for _ in range(4 * len(xs) + 8):
        found = False
        for step in range(1, 9):
            k = (backtrack + step) % 8
            dy, dx = offs[k]
            ny, nx = cy + dy, cx + dx
            if fg(ny, nx):
                # backtrack for the next pixel: the background cell scanned just before it
                pdy, pdx = offs[(k - 1) % 8]
                rel = (cy + pdy - ny, cx + pdx - nx)
                backtrack = offs.index(rel)
                cy, cx = ny, nx
                found = True
                break
        if not found:
            break
        state = (cy, cx, backtrack)
        if (cy, cx) == (sy, sx):
            # Jacob's criterion: finish on re-entering the start the same way
            if start_state is None:
                start_state = state
            elif state == start_state:
                break
        boundary.append((cx, cy))
    pts = np.array(boundary)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    # keep a single loop: truncate at the first revisit of the start pixel
    revisit = np.flatnonzero(np.all(pts[1:] == pts[0], axis=1))
    if len(revisit):
        pts = pts[: revisit[0] + 1]
    return pts


def _outer_contour(boundary: np.ndarray, interior_point: np.ndarray) -> np.ndarray:
    """Push ordered boundary pixel centres half a pixel along outward normals.

    Boundary pixels are the outermost *inside* samples of the component, so
    the continuous contour runs about half a pixel further out; this offset
    removes the systematic shrink of fits to raster data.
    """
    pts = boundary.astype(float)
    if len(pts) < 3:
        return pts
    tang = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    normals = np.column_stack([tang[:, 1], -tang[:, 0]])
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] /= norms[ok, None]
    normals[~ok] = 0.0
    outward = np.einsum("ij,ij->i", normals, pts - interior_point)
    normals[outward < 0] *= -1.0
    return pts + 0.5 * normals


def _conic_from_points(pts: np.ndarray) -> np.ndarray:
    """Direct least-squares ellipse-constrained conic (Halir-Flusser form)."""
    x = pts[:, 0] - pts[:, 0].mean()
    y = pts[:, 1] - pts[:, 1].mean()
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones(len(x))])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise NotAnEllipseError(f"degenerate boundary: {exc}") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    try:
        eigval, eigvec = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise NotAnEllipseError(f"eigen solve failed: {exc}") from exc
    cond = 4.0 * eigvec[0] * eigvec[2] - eigvec[1] ** 2
    good = np.flatnonzero((cond > 0) & np.isfinite(eigval))
    if len(good) == 0:
        raise NotAnEllipseError("no elliptical solution for this boundary")
    a1 = np.real(eigvec[:, good[0]])
    conic = np.concatenate([a1, T @ a1])
    # undo the centring shift
    A, B, C, D, E, F = conic
    mx, my = pts[:, 0].mean(), pts[:, 1].mean()
    D2_ = D - 2.0 * A * mx - B * my
    E2_ = E - 2.0 * C * my - B * mx
    F2_ = A * mx * mx + B * mx * my + C * my * my - D * mx - E * my + F
    out = np.array([A, B, C, D2_, E2_, F2_])
    return out / np.linalg.norm(out)


def _conic_to_ellipse(conic: np.ndarray, residual: float) -> EllipseParams:
    A, B, C, D, E, F = conic
    den = B * B - 4.0 * A * C
    if den >= 0:
        raise NotAnEllipseError("conic is not an ellipse")
    if A + C < 0:
        A, B, C, D, E, F = -conic
    cx = (2.0 * C * D - B * E) / den
    cy = (2.0 * A * E - B * D) / den
    num = 2.0 * (A * E * E + C * D * D - B * D * E + F * den)
    root = math.sqrt((A - C) ** 2 + B * B)
    s1 = num * (A + C + root)
    s2 = num * (A + C - root)
    if s1 <= 0 or s2 <= 0:
        raise NotAnEllipseError("conic has no real elliptical axes")
    a_len = math.sqrt(s1) / (-den)
    b_len = math.sqrt(s2) / (-den)
    if B == 0.0:
        theta = 0.0 if A <= C else math.pi / 2.0
    else:
        theta = 0.5 * math.atan2(B, A - C) + math.pi / 2.0
    if a_len < b_len:
        a_len, b_len = b_len, a_len
        theta += math.pi / 2.0
    theta = theta % math.pi
    if a_len <= 0 or b_len <= 0 or not np.isfinite(a_len + b_len):
        raise NotAnEllipseError("degenerate ellipse axes")
    return EllipseParams(center=(float(cx), float(cy)), a=float(a_len), b=float(b_len), theta=float(theta), residual=float(residual))


def fit_ellipse(blob: Blob) -> EllipseParams:
    """Direct least-squares ellipse fit to the blob's traced boundary.

    Requires area >= 6 px; the residual is the RMS algebraic distance of the
    boundary under a unit-norm conic.
    """
    if blob.area < 6:
        raise NotAnEllipseError(f"blob {blob.blob_id}: area {blob.area} below 6 px")
    crop, x0, y0 = blob.mask_crop()
    boundary = moore_boundary(crop).astype(float)
    boundary[:, 0] += x0
    boundary[:, 1] += y0
    if len(boundary) < 6:
        boundary = np.column_stack([blob.xs, blob.ys]).astype(float)
    else:
        boundary = _outer_contour(boundary, blob.centroid)
    conic = _conic_from_points(boundary)
    hom = np.column_stack(
        [
            boundary[:, 0] ** 2,
            boundary[:, 0] * boundary[:, 1],
            boundary[:, 1] ** 2,
            boundary[:, 0],
            boundary[:, 1],
            np.ones(len(boundary)),
        ]
    )
    residual = float(np.sqrt(np.mean((hom @ conic) ** 2)))
    return _conic_to_ellipse(conic, residual)


def cluster_masks(blobs: list[Blob], k: int) -> np.ndarray:
    """Deterministic k-means over blob centroids (farthest-point seeding).

    Labels depend only on the blob order; ties break toward the lowest blob
    index and the lowest cluster label.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not blobs:
        raise ValueError("no blobs to cluster")
    if k > len(blobs):
        raise OverClusteredError(f"k={k} exceeds blob count {len(blobs)}")
    pts = np.array([b.centroid for b in blobs])
    centers = [pts[int(np.argmax(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))]]
    while len(centers) < k:
        d2 = np.min([((pts - c) ** 2).sum(axis=1) for c in centers], axis=0)
        centers.append(pts[int(np.argmax(d2))])
    centers = np.array(centers)
    labels = np.full(len(pts), -1, dtype=int)
    for _ in range(100):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = pts[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels


@dataclass
class PinholeGridAssignment:
    """Lattice indices and physical coordinates for the blobs of one mask."""

    mask_id: int
    blob_ids: np.ndarray
    row: np.ndarray
    col: np.ndarray
    local_mm: np.ndarray
    world: np.ndarray
    confidence: np.ndarray
    basis: np.ndarray  # raster-space lattice basis, rows (col step, row step)
    anchor: np.ndarray

    def __len__(self) -> int:
        return len(self.blob_ids)


def _grow_lattice(pts: np.ndarray, tree: cKDTree, seed: int, v1: np.ndarray, v2: np.ndarray, tol_frac: float):
    """Breadth-first lattice growth with locally adapted step vectors.

    Perspective foreshortening makes the grid spacing drift across the field,
    so each cell predicts its neighbours from the steps measured on the path
    that reached it rather than from one global basis.
    """
    from collections import deque

    assigned: dict[int, tuple[int, int]] = {seed: (0, 0)}
    occupied = {(0, 0)}
    taken = {seed}
    # per-cell local step vectors (col step, row step)
    steps = {seed: (v1.copy(), v2.copy())}
    residual = {seed: 0.0}
    queue = deque([seed])
    while queue:
        cur = queue.popleft()
        c0, r0 = assigned[cur]
        vc, vr = steps[cur]
        for dc, dr, v in ((1, 0, vc), (-1, 0, -vc), (0, 1, vr), (0, -1, -vr)):
            target = (c0 + dc, r0 + dr)
            if target in occupied:
                continue
            pred = pts[cur] + v
            dist, j = tree.query(pred)
            if j in taken:
                continue
            vnorm = float(np.linalg.norm(v))
            if dist > tol_frac * vnorm:
                continue
            assigned[j] = target
            occupied.add(target)
            taken.add(j)
            step_c, step_r = steps[cur]
            measured = pts[j] - pts[cur]
            if dc:
                step_c = measured * dc
            else:
                step_r = measured * dr
            steps[j] = (step_c, step_r)
            residual[j] = float(dist) / vnorm
            queue.append(j)
    return assigned, residual


def recognize_grid(
    blobs: list[Blob],
    mask: PinholeMask,
    mask_id: int = 0,
    rng_seed: int = 0x5EED,
    inlier_tol_frac: float = 0.3,
    trials: int = 48,
) -> PinholeGridAssignment:
    """Assign integer lattice indices to the blobs of one pinhole mask.

    Seed bases come from RANSAC over centroid difference vectors; the lattice
    then grows cell by cell with locally adapted steps, which tolerates the
    projective spacing drift of a strongly tilted scanner. Blobs inconsistent
    with the dominant lattice are dropped. Indices anchor the top-left
    detected blob at (0, 0) and map to mask-local metric coordinates through
    the grid pitch.
    """
    if len(blobs) < 4:
        raise GridNotFoundError(f"need at least 4 blobs, got {len(blobs)}")
    pts = np.array([b.centroid for b in blobs])
    tree = cKDTree(pts)
    n_neigh = min(7, len(blobs))
    _, nbrs = tree.query(pts, k=n_neigh)
    rng = np.random.default_rng(rng_seed)
    order_center = np.argsort(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
    seeds = list(order_center[: max(1, len(pts) // 4)])
    best = None
    for trial in range(trials):
        seed = int(seeds[int(rng.integers(0, len(seeds)))])
        diffs = pts[nbrs[seed][1:]] - pts[seed]
        norms = np.linalg.norm(diffs, axis=1)
        ok = norms > 1e-9
        diffs, norms = diffs[ok], norms[ok]
        if len(diffs) < 2:
            continue
        order = np.argsort(norms)
        v1 = diffs[order[0]]
        v2 = None
        for j in order[1:]:
            cross = abs(v1[0] * diffs[j][1] - v1[1] * diffs[j][0])
            if cross > 0.3 * np.linalg.norm(v1) * norms[j]:
                v2 = diffs[j]
                break
        if v2 is None:
            continue
        assigned, residual = _grow_lattice(pts, tree, seed, v1, v2, inlier_tol_frac)
        score = (len(assigned), -sum(residual.values()))
        if best is None or score > best[0]:
            best = (score, assigned, residual)
    if best is None:
        raise GridNotFoundError("no non-collinear basis candidates (degenerate layout)")
    _, assigned, residual = best
    if len(assigned) < max(4, math.ceil(0.5 * len(blobs))):
        raise GridNotFoundError(
            f"dominant lattice covers only {len(assigned)}/{len(blobs)} blobs"
        )
    idx = np.array(sorted(assigned), dtype=int)
    cr = np.array([assigned[i] for i in idx])
    col, row = cr[:, 0], cr[:, 1]
    # canonical orientation: columns along the +x raster axis, rows along +y
    span_c = pts[idx[np.argmax(col)]] - pts[idx[np.argmin(col)]]
    span_r = pts[idx[np.argmax(row)]] - pts[idx[np.argmin(row)]]
    if abs(span_c[0]) < abs(span_r[0]):
        col, row = row, col
        span_c, span_r = span_r, span_c
    if span_c[0] < 0:
        col = -col
    if span_r[1] < 0:
        row = -row
    col = col - col.min()
    row = row - row.min()
    keep = (col < mask.cols) & (row < mask.rows)
    idx, col, row = idx[keep], col[keep], row[keep]
    if len(idx) < 4:
        raise GridNotFoundError("fewer than 4 blobs consistent with the lattice")
    res = np.array([residual[i] for i in idx])
    local = np.column_stack([col * mask.pitch_mm, row * mask.pitch_mm])
    world = mask.frame.to_world(local)
    conf = np.clip(1.0 - res / inlier_tol_frac, 0.0, 1.0)
    basis = np.array([span_c / max(1, col.max()), span_r / max(1, row.max())])
    return PinholeGridAssignment(
        mask_id=mask_id,
        blob_ids=np.array([blobs[i].blob_id for i in idx]),
        row=row,
        col=col,
        local_mm=local,
        world=world,
        confidence=conf,
        basis=basis,
        anchor=pts[idx[0]],
    )


def check_blob_overlap(blobs: list[Blob], safety: float = 0.78) -> None:
    """Raise :class:`OverlappingBlobsError` when fitted ellipses collide.

    Components must be arranged so blobs stay disjoint on the scanner; there
    is deliberately no deblending. Merged patches surface as single oversized
    components; this check guards the near-touching regime where centroids
    and ellipse fits stop being trustworthy, with enough slack that ragged
    boundaries of healthy neighbours do not trip it.
    """
    fitted = [b for b in blobs if b.ellipse is not None]
    if len(fitted) < 2:
        return
    pts = np.array([b.centroid for b in fitted])
    r_max = max(b.ellipse.a for b in fitted)
    tree = cKDTree(pts)
    for i, j in sorted(tree.query_pairs(2.0 * r_max)):
        bi, bj = fitted[i], fitted[j]
        d = bj.centroid - bi.centroid
        dist = float(np.hypot(*d))
        ang = math.atan2(d[1], d[0])
        if dist < safety * (bi.ellipse.support_radius(ang) + bj.ellipse.support_radius(ang)):
            raise OverlappingBlobsError(
                f"blobs {bi.blob_id} and {bj.blob_id} overlap "
                f"(separation {dist:.1f} px)"
            )
