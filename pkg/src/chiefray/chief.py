"""Chief-ray pixel extraction by back-projecting blobs onto the panel.

Every scanner pixel inside a blob decodes to the panel pixel that lit it.
Collected on the panel, those coordinates form a disc that is an exact
circle whenever the panel is parallel to the lens principal plane, no matter
how the scanner is tilted; the circle centre is the pixel whose chief ray
threads the pinhole. The ellipse-centre shortcut on the scanner plane is kept
as a comparison baseline: it coincides with the chief pixel only when the
scanner is parallel to the principal plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .blobs import Blob, fit_ellipse
from .errors import DegenerateCircleError, MissingCodeError, NotAnEllipseError
from .geometry import RasterPlane
from .graycode import DecodedMap, forward_lookup, inverse_lookup

DEFAULT_MIN_BACKPROJ_POINTS = 12

STATUS_OK = "ok"
STATUS_MISSING_CODE = "missing-code"


@dataclass(frozen=True)
class PinholeRef:
    """Identity and physical position of one recognized pinhole."""

    mask_id: int
    row: int
    col: int
    world: tuple[float, float, float]
    local_mm: tuple[float, float]

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.mask_id, self.row, self.col)


@dataclass
class BackprojectedBlob:
    """Panel-plane coordinates decoded from one blob's scanner pixels.

    ``points`` are unique decoded (u, v) pairs and ``counts`` their scanner
    pixel multiplicity, which weights fits in place of irradiance when no
    energy channel is available. ``energies`` (optional) holds the mean scan
    value of each code's pixels; the mean, unlike the sum, is immune to how
    many raster pixels the scan grid happened to give a code cell.
    """

    points: np.ndarray
    counts: np.ndarray
    blob_id: int
    energies: np.ndarray | None = None

    @property
    def total_points(self) -> int:
        return int(self.counts.sum())

    def fit_weights(self) -> np.ndarray:
        if self.energies is None:
            return self.counts
        return self.counts * self.energies


@dataclass(frozen=True)
class CircleFit:
    center: tuple[float, float]
    radius: float
    rms: float


@dataclass
class ChiefRaySample:
    """One calibration measurement: pinhole, chief pixel, scanner point."""

    pinhole: PinholeRef | None
    chief_px: np.ndarray  # (u, v)
    scanner_raster: np.ndarray  # (x, y) scan px
    scanner_world: np.ndarray  # (x, y, z) mm
    residual: float
    status: str = STATUS_OK
    blob_id: int = -1


def backproject(
    blob: Blob,
    dmap: DecodedMap,
    min_points: int = DEFAULT_MIN_BACKPROJ_POINTS,
    energy_image: np.ndarray | None = None,
    support_margin_px: int = 5,
) -> BackprojectedBlob:
    """Decoded panel coordinates of every valid scanner pixel in the blob.

    Invalid pixels inside the blob are skipped silently until fewer than
    ``min_points`` remain, which raises :class:`MissingCodeError`. The blob
    support is dilated by ``support_margin_px`` before collecting codes so
    the faint rim of the back-projected disc, which falls below the
    segmentation threshold, is not clipped; codes far from the blob's own
    cluster (neighbouring blobs entering through the margin) are discarded.
    Passing the white scan as ``energy_image`` attaches per-code mean
    irradiance for downstream weighting and profile refinement.
    """
    ok_core = dmap.valid[blob.ys, blob.xs]
    n_valid = int(ok_core.sum())
    if n_valid < min_points:
        raise MissingCodeError(
            f"blob {blob.blob_id}: only {n_valid} decodable pixels (need {min_points})"
        )
    h, w = dmap.shape
    margin = max(0, int(support_margin_px))
    x0, x1 = max(0, int(blob.xs.min()) - margin), min(w - 1, int(blob.xs.max()) + margin)
    y0, y1 = max(0, int(blob.ys.min()) - margin), min(h - 1, int(blob.ys.max()) + margin)
    support = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
    support[blob.ys - y0, blob.xs - x0] = True
    if margin:
        support = ndimage.binary_dilation(support, iterations=margin)
    ys, xs = np.nonzero(support)
    ys = ys + y0
    xs = xs + x0
    ok = dmap.valid[ys, xs]
    ys, xs = ys[ok], xs[ok]
    u = dmap.u[ys, xs].astype(np.int64)
    v = dmap.v[ys, xs].astype(np.int64)
    key = u * (dmap.proj_height + 1) + v
    order = np.argsort(key, kind="stable")
    uniq, starts, counts = np.unique(key[order], return_index=True, return_counts=True)
    energies = None
    if energy_image is not None:
        vals = np.asarray(energy_image, dtype=float)[ys, xs][order]
        energies = np.add.reduceat(vals, starts) / counts
    pts = np.column_stack([uniq // (dmap.proj_height + 1), uniq % (dmap.proj_height + 1)]).astype(float)
    # guard against codes bleeding in from neighbouring blobs via the margin
    med = np.median(pts, axis=0)
    radii = np.linalg.norm(pts - med, axis=1)
    keep = radii < 4.0 * np.median(radii) + 8.0
    pts, counts = pts[keep], counts[keep]
    if energies is not None:
        energies = energies[keep]
    if len(pts) < 3:
        raise MissingCodeError(f"blob {blob.blob_id}: too few distinct codes")
    return BackprojectedBlob(
        points=pts, counts=counts.astype(float), blob_id=blob.blob_id, energies=energies
    )


def _kasa_fit(pts: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    """Weighted algebraic circle fit; exact on noise-free circles."""
    A = np.column_stack([2.0 * pts, np.ones(len(pts))])
    b = (pts**2).sum(axis=1)
    sw = np.sqrt(w)
    Aw = A * sw[:, None]
    bw = b * sw
    sol, _, rank, sv = np.linalg.lstsq(Aw, bw, rcond=None)
    if rank < 3 or sv[-1] < 1e-10 * sv[0]:
        raise DegenerateCircleError("collinear points admit no circle")
    center = sol[:2]
    r2 = sol[2] + center @ center
    if r2 <= 0:
        raise DegenerateCircleError("algebraic fit produced a non-positive radius")
    return center, math.sqrt(r2)


def fit_circle(points, weights=None, max_iter: int = 60, tol: float = 1e-14) -> CircleFit:
    """Algebraic circle fit refined by geometric Levenberg-Marquardt.

    Minimises the weighted orthogonal distance to the circle over centre and
    radius. Accepts a :class:`BackprojectedBlob` or an (n, 2) point array.
    """
    if isinstance(points, BackprojectedBlob):
        pts = points.points
        w = points.counts if weights is None else np.asarray(weights, dtype=float)
    else:
        pts = np.asarray(points, dtype=float)
        w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise DegenerateCircleError("need at least 3 points in the plane")
    center, radius = _kasa_fit(pts, w)

    def residuals(c, r):
        return np.sqrt(((pts - c) ** 2).sum(axis=1)) - r

    lam = 1e-6
    r = residuals(center, radius)
    cost = float(w @ (r * r))
    for _ in range(max_iter):
        d = pts - center
        dist = np.sqrt((d * d).sum(axis=1))
        dist = np.maximum(dist, 1e-12)
        J = np.column_stack([-d[:, 0] / dist, -d[:, 1] / dist, -np.ones(len(pts))])
        Jw = J * w[:, None]
        g = Jw.T @ r
        H = Jw.T @ J
        step_ok = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            c_new = center + delta[:2]
            r_new = radius + delta[2]
            rr = residuals(c_new, r_new)
            cost_new = float(w @ (rr * rr))
            if cost_new <= cost and r_new > 0:
                rel = (cost - cost_new) / max(cost, 1e-300)
                center, radius, r, cost = c_new, r_new, rr, cost_new
                lam = max(lam * 0.3, 1e-12)
                step_ok = rel > tol
                break
            lam *= 10.0
        if not step_ok:
            break
    rms = math.sqrt(cost / float(w.sum()))
    return CircleFit(center=(float(center[0]), float(center[1])), radius=float(radius), rms=rms)


def _hull_weighted(bp: BackprojectedBlob) -> tuple[np.ndarray, np.ndarray]:
    """Convex-hull boundary with interior multiplicity folded into hull vertices."""
    pts, counts = bp.points, bp.fit_weights()
    if bp.energies is not None:
        # gate faint rim codes so the hull tracks the bright rim, not stray
        # skirt cells
        floor = 0.25 * float(np.percentile(bp.energies, 75))
        keep = bp.energies > floor
        if keep.sum() >= 3:
            pts, counts = pts[keep], counts[keep]
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateCircleError(f"back-projected points are degenerate: {exc}") from exc
    verts = np.sort(hull.vertices)
    hull_pts = pts[verts]
    tree = cKDTree(hull_pts)
    _, nearest = tree.query(pts)
    weights = np.bincount(nearest, weights=counts, minlength=len(hull_pts))
    return hull_pts, weights


def fit_chief_circle(bp: BackprojectedBlob, fit_mode: str = "hull") -> CircleFit:
    """Circle fit of a back-projected blob under the configured point policy.

    ``hull`` fits the convex-hull boundary (lens-edge rays define the rim)
    with interior points contributing multiplicity to their nearest rim
    vertex; ``all`` fits every decoded point directly.
    """
    if fit_mode == "hull":
        pts, w = _hull_weighted(bp)
        return fit_circle(pts, weights=w)
    if fit_mode == "all":
        return fit_circle(bp.points, weights=bp.fit_weights())
    raise ValueError(f"unknown fit_mode {fit_mode!r}")


def refine_center_profile(
    bp: BackprojectedBlob,
    seed: CircleFit,
    panel_width: int,
    panel_height: int,
    max_iter: int = 40,
) -> CircleFit | None:
    """Sub-cell centre refinement by fitting the radial energy profile.

    Models per-code mean irradiance as ``(plateau + linear gain) *
    softstep((R - r)/w)``: the soft rim carries the centre information while
    the linear gain term absorbs the smooth brightness drift that oblique
    scanner geometry imprints on the blob. Codes inside the fit radius that
    decoded nowhere count as zero-energy evidence; panel coordinates outside
    the device are excluded rather than zero-filled. Returns ``None`` when
    the blob offers too little data for a stable fit.
    """
    if bp.energies is None or len(bp.points) < 40:
        return None
    from scipy.special import erf

    c0 = np.asarray(seed.center, dtype=float)
    R0 = float(seed.radius)
    pts, E, cnt = bp.points, bp.energies.copy(), bp.counts.copy()
    present = {(int(p[0]), int(p[1])) for p in pts}
    extra = []
    reach = int(math.ceil(R0 + 3.0))
    cx, cy = int(round(c0[0])), int(round(c0[1]))
    for du in range(-reach, reach + 1):
        for dv in range(-reach, reach + 1):
            if du * du + dv * dv > (R0 + 3.0) ** 2:
                continue
            p = (cx + du, cy + dv)
            if p in present or not (0 <= p[0] < panel_width and 0 <= p[1] < panel_height):
                continue
            extra.append(p)
    if extra:
        pts = np.vstack([pts, np.array(extra, dtype=float)])
        E = np.concatenate([E, np.zeros(len(extra))])
        cnt = np.concatenate([cnt, np.ones(len(extra))])
    inside = np.linalg.norm(pts - c0, axis=1) < 0.6 * R0
    if inside.sum() < 8:
        return None
    alpha0 = float(np.median(E[inside]))
    if alpha0 <= 0:
        return None
    ws = np.sqrt(cnt)
    x = np.array([c0[0], c0[1], R0, 1.0, alpha0, 0.0, 0.0])

    def model(xv: np.ndarray) -> np.ndarray:
        c = xv[:2]
        width = max(float(xv[3]), 0.2)
        r = np.linalg.norm(pts - c, axis=1)
        gain = xv[4] + (pts - c) @ xv[5:7]
        return gain * 0.5 * (1.0 + erf((xv[2] - r) / width))

    resid = (model(x) - E) * ws
    cost = float(resid @ resid)
    lam = 1e-3
    for _ in range(max_iter):
        J = np.empty((len(E), 7))
        for j in range(7):
            h = 1e-5 * max(1.0, abs(float(x[j])))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = ws * (model(xp) - model(xm)) / (2.0 * h)
        g = J.T @ resid
        H = J.T @ J
        improved = False
        for _ in range(10):
            try:
                step = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = (model(x_new) - E) * ws
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-300)
                x, resid, cost = x_new, r_new, cost_new
                lam = max(lam * 0.3, 1e-10)
                improved = rel > 1e-10
                break
            lam *= 10.0
        if not improved:
            break
    if not np.all(np.isfinite(x[:3])) or x[2] <= 1.0:
        return None
    if np.linalg.norm(x[:2] - c0) > 0.5 * R0:
        return None  # wandered off; distrust
    return CircleFit(center=(float(x[0]), float(x[1])), radius=float(x[2]), rms=seed.rms)


def extract_chief(
    blob: Blob,
    dmap: DecodedMap,
    raster: RasterPlane,
    pinhole: PinholeRef | None = None,
    fit_mode: str = "hull",
    min_points: int = DEFAULT_MIN_BACKPROJ_POINTS,
    energy_image: np.ndarray | None = None,
    profile_refine: bool = True,
) -> ChiefRaySample:
    """Chief-ray sample of one blob: circle-fit centre plus scanner lookup.

    The circle fit seeds a radial-profile refinement of the centre whenever
    the white-scan energy channel is available (see
    :func:`refine_center_profile`); disable with ``profile_refine=False``.
    """
    bp = backproject(blob, dmap, min_points=min_points, energy_image=energy_image)
    fit = fit_chief_circle(bp, fit_mode=fit_mode)
    if profile_refine and energy_image is not None:
        refined = refine_center_profile(bp, fit, dmap.proj_width, dmap.proj_height)
        if refined is not None:
            fit = refined
    chief = np.asarray(fit.center, dtype=float)
    # discs whose rim reaches the panel edge lose codes to the missing-pattern
    # failure mode and their fitted centre drifts; reject them outright
    edge_dist = min(
        chief[0], dmap.proj_width - 1 - chief[0], chief[1], dmap.proj_height - 1 - chief[1]
    )
    if fit.radius - edge_dist > -0.5:
        raise MissingCodeError(
            f"blob {blob.blob_id}: back-projected disc clipped by the panel edge"
        )
    scan_xy = inverse_lookup(dmap, chief, weight_image=energy_image)
    world = raster.raster_to_world(scan_xy)
    return ChiefRaySample(
        pinhole=pinhole,
        chief_px=chief,
        scanner_raster=np.asarray(scan_xy, dtype=float),
        scanner_world=np.asarray(world, dtype=float),
        residual=fit.rms,
        status=STATUS_OK,
        blob_id=blob.blob_id,
    )


def naive_center(
    blob: Blob,
    dmap: DecodedMap,
    raster: RasterPlane,
    pinhole: PinholeRef | None = None,
) -> ChiefRaySample:
    """Baseline sample that treats the scanner-plane ellipse centre as chief.

    Kept solely for comparison against :func:`extract_chief`; on a tilted
    scanner the ellipse centre is systematically displaced from the true
    chief-ray intersection.
    """
    ellipse = blob.ellipse
    if ellipse is None:
        try:
            ellipse = fit_ellipse(blob)
        except NotAnEllipseError as exc:
            raise MissingCodeError(f"blob {blob.blob_id}: no ellipse for the baseline") from exc
    center = np.asarray(ellipse.center, dtype=float)
    code = forward_lookup(dmap, center)
    world = raster.raster_to_world(center)
    return ChiefRaySample(
        pinhole=pinhole,
        chief_px=np.asarray(code, dtype=float),
        scanner_raster=center,
        scanner_world=np.asarray(world, dtype=float),
        residual=float(ellipse.residual),
        status=STATUS_OK,
        blob_id=blob.blob_id,
    )
