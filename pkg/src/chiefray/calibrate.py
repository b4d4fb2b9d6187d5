"""Planar-view intrinsic calibration with iterative outlier exclusion.

Correspondence sets pair each pinhole's chief pixel with two planar object
points: the pinhole on its mask plane and the chief-ray intersection on the
scanner plane. Three mutually tilted planes feed the classic closed form
(absolute-conic constraints from per-view homographies, zero skew), followed
by a joint Levenberg-Marquardt refinement of the intrinsics and per-view
poses. The robust loop then repeatedly removes the correspondence set with
the worst scanner-plane reprojection error and stops at the first local
minimum of the error curve, capped at a configurable fraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import (
    ClosedFormFailedError,
    InsufficientViewError,
    LMFailedError,
    PnPDegenerateError,
)
from .geometry import (
    Homography,
    Intrinsics,
    PlaneFrame,
    RigidPose,
    estimate_homography,
    polar_orthonormalize,
    project,
    project_many,
    rotation_from_axis_angle,
    unproject_ray,
)
from .validation import as_points

logger = logging.getLogger(__name__)

SCANNER_PLANE = "scanner"


@dataclass(frozen=True)
class CorrespondenceSet:
    """One pinhole's measurements across the three fiducial planes."""

    key: tuple[int, int, int]  # (mask_id, row, col)
    mask_plane: str
    mask_xy: tuple[float, float]
    scanner_xy: tuple[float, float]
    image_px: tuple[float, float]


@dataclass
class PlanarView:
    """Plane-local object points paired with measured pixels for one plane."""

    plane_id: str
    object_xy: np.ndarray
    image_px: np.ndarray
    set_keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.object_xy)


@dataclass
class PoseEstimate:
    pose: RigidPose
    rms_px: float


@dataclass
class CalibrationResult:
    """Estimated intrinsics, per-plane extrinsics, and the exclusion ledger."""

    intrinsics: Intrinsics
    views: list  # of (plane_id, RigidPose)
    mrpe_projector: float
    mrpe_scanner: float
    excluded: list  # ordered (mask_id, row, col) keys
    error_curve: list
    warnings: list = field(default_factory=list)

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)

    def pose_of(self, plane_id: str) -> RigidPose:
        for pid, pose in self.views:
            if pid == plane_id:
                return pose
        raise KeyError(plane_id)

    def to_json_dict(self) -> dict:
        d = self.intrinsics.to_json_dict()
        d["mrpe_projector_px"] = self.mrpe_projector
        d["mrpe_scanner_px"] = self.mrpe_scanner
        d["views"] = [
            {
                "plane": pid,
                "R": [float(x) for x in pose.rotation.ravel()],
                "t": [float(x) for x in pose.translation],
            }
            for pid, pose in self.views
        ]
        d["excluded"] = [list(k) for k in self.excluded]
        d["error_curve"] = [float(e) for e in self.error_curve]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "CalibrationResult":
        views = [
            (
                v["plane"],
                RigidPose.from_matrix(
                    np.asarray(v["R"], dtype=float).reshape(3, 3),
                    v["t"],
                    orthonormalize=True,
                ),
            )
            for v in d.get("views", [])
        ]
        return cls(
            intrinsics=Intrinsics.from_json_dict(d),
            views=views,
            mrpe_projector=float(d["mrpe_projector_px"]),
            mrpe_scanner=float(d["mrpe_scanner_px"]),
            excluded=[tuple(int(x) for x in k) for k in d.get("excluded", [])],
            error_curve=[float(e) for e in d.get("error_curve", [])],
        )


def build_views(samples, scanner_frame: PlaneFrame, expected_planes: int = 3, min_pairs: int = 4):
    """Assemble planar views and correspondence sets from chief-ray samples.

    Samples without ok status or pinhole identity are dropped. Raises
    :class:`InsufficientViewError` when fewer than ``expected_planes`` planes
    reach ``min_pairs`` pairs.
    """
    sets: list[CorrespondenceSet] = []
    for s in samples:
        if s.status != "ok" or s.pinhole is None:
            continue
        local, _ = scanner_frame.to_local(np.asarray(s.scanner_world, dtype=float))
        sets.append(
            CorrespondenceSet(
                key=s.pinhole.key,
                mask_plane=f"mask{s.pinhole.mask_id}",
                mask_xy=(float(s.pinhole.local_mm[0]), float(s.pinhole.local_mm[1])),
                scanner_xy=(float(local[0]), float(local[1])),
                image_px=(float(s.chief_px[0]), float(s.chief_px[1])),
            )
        )
    views = sets_to_views(sets, expected_planes=expected_planes, min_pairs=min_pairs)
    return views, sets


def sets_to_views(sets, expected_planes: int | None = None, min_pairs: int = 4):
    """Group correspondence sets into one scanner view plus per-mask views."""
    planes: dict[str, list] = {SCANNER_PLANE: []}
    for s in sets:
        planes[SCANNER_PLANE].append((s.scanner_xy, s.image_px, s.key))
        planes.setdefault(s.mask_plane, []).append((s.mask_xy, s.image_px, s.key))
    views = []
    for pid in sorted(planes, key=lambda p: (p != SCANNER_PLANE, p)):
        rows = planes[pid]
        views.append(
            PlanarView(
                plane_id=pid,
                object_xy=np.array([r[0] for r in rows], dtype=float).reshape(-1, 2),
                image_px=np.array([r[1] for r in rows], dtype=float).reshape(-1, 2),
                set_keys=[r[2] for r in rows],
            )
        )
    if expected_planes is not None and len(views) < expected_planes:
        raise InsufficientViewError(
            f"only {len(views)} planes present, expected {expected_planes}"
        )
    short = [v.plane_id for v in views if len(v) < min_pairs]
    if short:
        raise InsufficientViewError(f"views below {min_pairs} pairs: {short}")
    return views


def _conic_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    """Absolute-conic constraint row with the skew entry eliminated.

    Unknowns are (B11, B22, B13, B23, B33); B12 is fixed at zero because the
    intrinsic matrix carries no skew.
    """
    return np.array(
        [
            H[0, i] * H[0, j],
            H[1, i] * H[1, j],
            H[2, i] * H[0, j] + H[0, i] * H[2, j],
            H[2, i] * H[1, j] + H[1, i] * H[2, j],
            H[2, i] * H[2, j],
        ]
    )


def _extrinsics_from_homography(K: Intrinsics, H: Homography, object_xy: np.ndarray) -> RigidPose:
    Kinv = np.linalg.inv(K.matrix)
    h1, h2, h3 = H.matrix[:, 0], H.matrix[:, 1], H.matrix[:, 2]
    r1p, r2p = Kinv @ h1, Kinv @ h2
    lam = 2.0 / (np.linalg.norm(r1p) + np.linalg.norm(r2p))
    r1, r2 = lam * r1p, lam * r2p
    t = lam * (Kinv @ h3)
    r3 = np.cross(r1, r2)
    R = polar_orthonormalize(np.column_stack([r1, r2, r3]))
    obj3 = np.column_stack([object_xy, np.zeros(len(object_xy))])
    depth = (obj3 @ R.T + t)[:, 2].mean()
    if depth < 0:
        r1, r2, t = -r1, -r2, -t
        r3 = np.cross(r1, r2)
        R = polar_orthonormalize(np.column_stack([r1, r2, r3]))
    return RigidPose.from_matrix(R, t, orthonormalize=True)


def zhang_closed_form(views) -> tuple[Intrinsics, dict]:
    """Closed-form intrinsics and per-view poses from planar homographies.

    Raises :class:`ClosedFormFailedError` when the stacked conic constraints
    are rank deficient or the recovered conic image is not positive definite,
    both signatures of degenerate (for instance parallel-plane) geometry.
    """
    if len(views) < 2:
        raise ClosedFormFailedError("need at least 2 planar views")
    homographies = {}
    rows = []
    for view in views:
        H, _ = estimate_homography(view.object_xy, view.image_px)
        homographies[view.plane_id] = H
        rows.append(_conic_row(H.matrix, 0, 1))
        rows.append(_conic_row(H.matrix, 0, 0) - _conic_row(H.matrix, 1, 1))
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    if len(s) < 5 or s[3] < 1e-9 * s[0]:
        raise ClosedFormFailedError("conic constraints are rank deficient (parallel planes?)")
    b = Vt[-1]
    B = np.array([[b[0], 0.0, b[2]], [0.0, b[1], b[3]], [b[2], b[3], b[4]]])
    if B[0, 0] < 0:
        B = -B
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise ClosedFormFailedError(f"conic image is not positive definite: {exc}") from exc
    K = np.linalg.inv(L.T)
    K = K / K[2, 2]
    K[0, 1] = 0.0
    if K[0, 0] <= 0 or K[1, 1] <= 0 or not np.all(np.isfinite(K)):
        raise ClosedFormFailedError("recovered focal lengths are not positive")
    intr = Intrinsics(fx=float(K[0, 0]), fy=float(K[1, 1]), cx=float(K[0, 2]), cy=float(K[1, 2]))
    poses = {
        view.plane_id: _extrinsics_from_homography(intr, homographies[view.plane_id], view.object_xy)
        for view in views
    }
    return intr, poses


def _pack(intr: Intrinsics, views, poses: dict) -> tuple[np.ndarray, list]:
    base = [poses[v.plane_id] for v in views]
    x = np.zeros(4 + 6 * len(views))
    x[:4] = [intr.fx, intr.fy, intr.cx, intr.cy]
    for i, pose in enumerate(base):
        x[4 + 6 * i + 3 : 4 + 6 * i + 6] = pose.translation
    return x, [p.rotation for p in base]


def _unpack(x: np.ndarray, base_rotations: list):
    intr = Intrinsics(fx=float(x[0]), fy=float(x[1]), cx=float(x[2]), cy=float(x[3]))
    Rs, ts = [], []
    for i, R0 in enumerate(base_rotations):
        w = x[4 + 6 * i : 4 + 6 * i + 3]
        Rs.append(R0 @ rotation_from_axis_angle(w))
        ts.append(x[4 + 6 * i + 3 : 4 + 6 * i + 6])
    return intr, Rs, ts


def refine_lm(
    intrinsics: Intrinsics,
    poses: dict,
    views,
    max_iter: int = 200,
    rel_tol: float = 1e-12,
) -> tuple[Intrinsics, dict, float]:
    """Joint Levenberg-Marquardt over intrinsics and per-view 6-DoF poses.

    Minimises the total squared pixel reprojection error; rotations move on a
    local axis-angle chart around the current estimate. Accepted steps never
    increase the cost; iteration stops when the relative cost improvement
    falls below ``rel_tol`` or after ``max_iter`` iterations.
    """
    obj3 = [np.column_stack([v.object_xy, np.zeros(len(v))]) for v in views]
    obs = [v.image_px for v in views]
    x, base_R = _pack(intrinsics, views, poses)

    def residuals(xv: np.ndarray) -> np.ndarray:
        intr, Rs, ts = _unpack(xv, base_R)
        parts = []
        for i in range(len(views)):
            uv, _ = project_many(intr, Rs[i], ts[i], obj3[i])
            parts.append((uv - obs[i]).ravel())
        return np.concatenate(parts)

    def jacobian(xv: np.ndarray, r0: np.ndarray) -> np.ndarray:
        J = np.empty((len(r0), len(xv)))
        for j in range(len(xv)):
            h = 1e-6 * max(1.0, abs(float(xv[j])))
            xp = xv.copy()
            xp[j] += h
            xm = xv.copy()
            xm[j] -= h
            J[:, j] = (residuals(xp) - residuals(xm)) / (2.0 * h)
        return J

    r = residuals(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise LMFailedError("initial reprojection cost is not finite")
    lam = 1e-3
    for _ in range(max_iter):
        J = jacobian(x, r)
        g = J.T @ r
        H = J.T @ J
        diag = np.diag(np.maximum(np.diag(H), 1e-12))
        improved = False
        for _ in range(16):
            try:
                step = np.linalg.solve(H + lam * diag, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = residuals(x_new)
            cost_new = float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise LMFailedError("reprojection cost diverged to non-finite values")
            if cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-300)
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                improved = rel > rel_tol
                break
            lam *= 10.0
        if not improved:
            break
    intr, Rs, ts = _unpack(x, base_R)
    out_poses = {
        v.plane_id: RigidPose.from_matrix(Rs[i], ts[i], orthonormalize=True)
        for i, v in enumerate(views)
    }
    n_pairs = sum(len(v) for v in views)
    mrpe = float(np.linalg.norm(r.reshape(-1, 2), axis=1).mean()) if n_pairs else 0.0
    return intr, out_poses, mrpe


def calibrate_views(views, max_iter: int = 200, rel_tol: float = 1e-12):
    """Closed form followed by LM refinement; returns (K, poses, mrpe_px)."""
    intr0, poses0 = zhang_closed_form(views)
    return refine_lm(intr0, poses0, views, max_iter=max_iter, rel_tol=rel_tol)


def reprojection_errors(
    intrinsics: Intrinsics,
    poses: dict,
    views,
    space: str = "projector",
    scan_pixel_pitch_mm: float = 1.0,
):
    """Per-point reprojection errors and their mean.

    ``projector`` measures image-plane distances between measured pixels and
    projected object points over every view. ``scanner`` intersects each
    measured pixel's ray with the scanner plane and measures the in-plane
    distance to the measured scanner point, in scanner pixels.
    """
    if space == "projector":
        errs = []
        for v in views:
            obj3 = np.column_stack([v.object_xy, np.zeros(len(v))])
            pose = poses[v.plane_id]
            uv, _ = project_many(intrinsics, pose.rotation, pose.translation, obj3)
            errs.append(np.linalg.norm(uv - v.image_px, axis=1))
        flat = np.concatenate(errs) if errs else np.empty(0)
        return flat, float(flat.mean()) if len(flat) else 0.0
    if space == "scanner":
        view = next((v for v in views if v.plane_id == SCANNER_PLANE), None)
        if view is None:
            raise ValueError("no scanner view present")
        errs = _scanner_plane_errors(intrinsics, poses[SCANNER_PLANE], view.image_px, view.object_xy)
        errs = errs / scan_pixel_pitch_mm
        return errs, float(errs.mean()) if len(errs) else 0.0
    raise ValueError(f"unknown error space {space!r}")


def _scanner_plane_errors(
    intrinsics: Intrinsics, pose: RigidPose, image_px: np.ndarray, object_xy: np.ndarray
) -> np.ndarray:
    """Distances (mm) on the scanner plane between measurements and ray hits."""
    # rays expressed directly in the scanner-local frame: pose maps
    # plane-local points into the projector frame
    Rt = pose.rotation.T
    origin = -Rt @ pose.translation
    d_cam = np.column_stack(
        [
            (image_px[:, 0] - intrinsics.cx) / intrinsics.fx,
            (image_px[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(len(image_px)),
        ]
    )
    dirs = d_cam @ pose.rotation  # = Rt @ d per row
    dz = dirs[:, 2]
    dz = np.where(np.abs(dz) < 1e-15, 1e-15, dz)
    s = -origin[2] / dz
    hits = origin[None, :2] + s[:, None] * dirs[:, :2]
    return np.linalg.norm(hits - object_xy, axis=1)


def robust_calibrate(
    sets,
    max_exclusion_fraction: float = 0.10,
    scan_pixel_pitch_mm: float = 1.0,
    expected_planes: int | None = None,
    min_pairs: int = 4,
    lm_max_iter: int = 200,
    lm_rel_tol: float = 1e-12,
) -> CalibrationResult:
    """Calibrate with iterative exclusion of worst correspondence sets.

    Each iteration recalibrates on the remaining sets, records the mean
    scanner-plane reprojection error over every set (excluded ones included,
    so the curve has no mechanical bias from the shrinking pool), and removes
    the remaining set with the largest scanner-plane error. The loop stops at
    the first failure of the curve to improve, or at the exclusion cap, and
    returns the arg-min iteration (earliest index on ties). The curve falls
    while outliers distort the fit and their removal keeps repairing the
    other measurements; once they are gone it flattens and turns upward,
    which is the stopping signal.
    """
    if not 0.0 <= max_exclusion_fraction <= 0.2:
        raise ValueError("max_exclusion_fraction must lie in [0, 0.2]")
    sets = list(sets)
    if not sets:
        raise InsufficientViewError("no correspondence sets")
    all_keys = [s.key for s in sets]
    if len(set(all_keys)) != len(all_keys):
        raise ValueError("correspondence sets carry duplicate pinhole keys")
    by_key = {s.key: s for s in sets}
    included = list(all_keys)
    excluded: list = []
    curve: list[float] = []
    records = []
    warnings: list[str] = []
    cap = int(math.floor(max_exclusion_fraction * len(sets)))
    if expected_planes is None:
        expected_planes = len({s.mask_plane for s in sets}) + 1
    rel_tol = 1e-9  # curve comparisons; exactly-clean data must choose n = 0

    all_view = sets_to_views(sets, expected_planes=None, min_pairs=0)
    scanner_all = next(v for v in all_view if v.plane_id == SCANNER_PLANE)

    for k in range(cap + 1):
        subset = [by_key[key] for key in included]
        try:
            views_k = sets_to_views(subset, expected_planes=expected_planes, min_pairs=min_pairs)
            intr, poses, mrpe_proj = calibrate_views(views_k, max_iter=lm_max_iter, rel_tol=lm_rel_tol)
        except (InsufficientViewError, ClosedFormFailedError, LMFailedError) as exc:
            if k == 0:
                raise
            warnings.append(f"stopped after {k} exclusions: {exc}")
            logger.warning("robust loop stopped early: %s", exc)
            break
        # error curve: scanner-plane error over every set at these parameters
        e_all = _scanner_plane_errors(
            intr, poses[SCANNER_PLANE], scanner_all.image_px, scanner_all.object_xy
        ) / scan_pixel_pitch_mm
        curve.append(float(e_all.mean()))
        # exclusion ranking: error over the remaining sets only
        scan_view = next(v for v in views_k if v.plane_id == SCANNER_PLANE)
        e_inc = _scanner_plane_errors(intr, poses[SCANNER_PLANE], scan_view.image_px, scan_view.object_xy)
        e_inc = e_inc / scan_pixel_pitch_mm
        records.append(
            dict(
                intrinsics=intr,
                poses=poses,
                mrpe_projector=mrpe_proj,
                mrpe_scanner=float(e_inc.mean()),
                views=views_k,
                excluded=list(excluded),
            )
        )
        if k > 0 and curve[k] > curve[k - 1] * (1.0 - rel_tol):
            break
        if k == cap or len(included) <= min_pairs:
            break
        worst = int(np.argmax(e_inc))
        worst_key = scan_view.set_keys[worst]
        excluded.append(worst_key)
        included.remove(worst_key)

    lowest = min(curve)
    n = next(i for i, e in enumerate(curve) if e <= lowest * (1.0 + rel_tol))
    rec = records[n]
    plane_order = [v.plane_id for v in rec["views"]]
    return CalibrationResult(
        intrinsics=rec["intrinsics"],
        views=[(pid, rec["poses"][pid]) for pid in plane_order],
        mrpe_projector=rec["mrpe_projector"],
        mrpe_scanner=rec["mrpe_scanner"],
        excluded=rec["excluded"],
        error_curve=curve,
        warnings=warnings,
    )


def solve_pnp(object_points, image_points, intrinsics: Intrinsics, refine: bool = True) -> PoseEstimate:
    """Pose from >= 4 coplanar world points via homography decomposition.

    The plane is fitted to the object points; the homography from plane-local
    coordinates to pixels is decomposed with the known intrinsics and the
    pose polished by LM on pixel reprojection. Returns the pose mapping world
    coordinates into the projector frame.
    """
    obj = as_points(object_points, 3, "object points")
    img = as_points(image_points, 2, "image points")
    if len(obj) != len(img):
        raise ValueError("object/image point counts differ")
    if len(obj) < 4:
        raise PnPDegenerateError(f"need at least 4 correspondences, got {len(obj)}")
    centroid = obj.mean(axis=0)
    centered = obj - centroid
    _, sv, Vt = np.linalg.svd(centered)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise PnPDegenerateError("object points are collinear")
    if sv[2] > 1e-6 * sv[0]:
        raise PnPDegenerateError("object points are not coplanar")
    e1, e2, n = Vt[0], Vt[1], Vt[2]
    if np.linalg.det(np.column_stack([e1, e2, n])) < 0:
        e2 = -e2
    A = np.vstack([e1, e2, n])
    local = centered @ np.column_stack([e1, e2])
    from .errors import DegenerateHomographyError

    try:
        H, _ = estimate_homography(local, img)
    except DegenerateHomographyError as exc:
        raise PnPDegenerateError(f"homography failed: {exc}") from exc
    pose_local = _extrinsics_from_homography(intrinsics, H, local)
    R_w = polar_orthonormalize(pose_local.rotation @ A)
    t_w = pose_local.translation - pose_local.rotation @ (A @ centroid)
    pose = RigidPose.from_matrix(R_w, t_w, orthonormalize=True)
    view = PlanarView(plane_id="pnp", object_xy=local, image_px=img)
    if refine:
        # reuse the joint refiner with frozen intrinsics via a single view
        poses = {"pnp": pose_local}
        refined = _refine_pose_only(intrinsics, poses["pnp"], view)
        R_w = polar_orthonormalize(refined.rotation @ A)
        t_w = refined.translation - refined.rotation @ (A @ centroid)
        pose = RigidPose.from_matrix(R_w, t_w, orthonormalize=True)
    uv, _ = project_many(intrinsics, pose.rotation, pose.translation, obj)
    rms = float(np.sqrt(np.mean(np.sum((uv - img) ** 2, axis=1))))
    return PoseEstimate(pose=pose, rms_px=rms)


def _refine_pose_only(intrinsics: Intrinsics, pose: RigidPose, view: PlanarView) -> RigidPose:
    obj3 = np.column_stack([view.object_xy, np.zeros(len(view))])
    base_R = pose.rotation
    x = np.concatenate([np.zeros(3), pose.translation])

    def residuals(xv):
        R = base_R @ rotation_from_axis_angle(xv[:3])
        uv, _ = project_many(intrinsics, R, xv[3:], obj3)
        return (uv - view.image_px).ravel()

    r = residuals(x)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(100):
        J = np.empty((len(r), 6))
        for j in range(6):
            h = 1e-7 * max(1.0, abs(float(x[j])))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = (residuals(xp) - residuals(xm)) / (2.0 * h)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = residuals(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-300)
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                improved = rel > 1e-14
                break
            lam *= 10.0
        if not improved:
            break
    return RigidPose.from_matrix(base_R @ rotation_from_axis_angle(x[:3]), x[3:], orthonormalize=True)


def evaluate_projection(
    intrinsics: Intrinsics,
    pose,
    corners,
    truth_intrinsics: Intrinsics,
    truth_pose: RigidPose,
    target_frame: PlaneFrame | None = None,
) -> np.ndarray:
    """Physical dot-placement errors (mm) on a planar target.

    Corner pixels are computed with the estimated parameters, then realised
    as physical rays by the true device model and intersected with the target
    plane; the return value is the distance of each dot from its corner.
    """
    if isinstance(pose, PoseEstimate):
        pose = pose.pose
    pts = as_points(corners, 3, "corners", min_count=1)
    if target_frame is None:
        centroid = pts.mean(axis=0)
        _, sv, Vt = np.linalg.svd(pts - centroid)
        normal = Vt[2]
        plane_point = centroid
    else:
        normal = target_frame.normal
        plane_point = target_frame.origin
    errors = np.empty(len(pts))
    for i, corner in enumerate(pts):
        px = project(intrinsics, pose, corner)
        origin, direction = unproject_ray(truth_intrinsics, truth_pose, px)
        denom = float(normal @ direction)
        if abs(denom) < 1e-15:
            errors[i] = np.inf
            continue
        s = float(normal @ (plane_point - origin)) / denom
        dot = origin + s * direction
        errors[i] = float(np.linalg.norm(dot - corner))
    return errors


class ProjectorCalibrator(BaseEstimator):
    """Scikit-learn style estimator around :func:`robust_calibrate`.

    ``fit`` consumes a list of :class:`CorrespondenceSet` (as produced by
    :func:`build_views`) and exposes the fitted parameters through trailing-
    underscore attributes, so the calibrator composes with sklearn tooling
    (``get_params``/``set_params``/``clone``).
    """

    def __init__(
        self,
        max_exclusion_fraction: float = 0.10,
        scan_pixel_pitch_mm: float = 1.0,
        expected_planes: int | None = None,
        min_pairs_per_view: int = 4,
        lm_max_iter: int = 200,
        lm_rel_tol: float = 1e-12,
    ):
        self.max_exclusion_fraction = max_exclusion_fraction
        self.scan_pixel_pitch_mm = scan_pixel_pitch_mm
        self.expected_planes = expected_planes
        self.min_pairs_per_view = min_pairs_per_view
        self.lm_max_iter = lm_max_iter
        self.lm_rel_tol = lm_rel_tol

    def fit(self, X, y=None):
        """Run the robust calibration on correspondence sets ``X``."""
        result = robust_calibrate(
            X,
            max_exclusion_fraction=self.max_exclusion_fraction,
            scan_pixel_pitch_mm=self.scan_pixel_pitch_mm,
            expected_planes=self.expected_planes,
            min_pairs=self.min_pairs_per_view,
            lm_max_iter=self.lm_max_iter,
            lm_rel_tol=self.lm_rel_tol,
        )
        self.result_ = result
        self.intrinsics_ = result.intrinsics
        self.poses_ = dict(result.views)
        self.mrpe_projector_ = result.mrpe_projector
        self.mrpe_scanner_ = result.mrpe_scanner
        self.excluded_ = list(result.excluded)
        self.error_curve_ = list(result.error_curve)
        return self

    def score(self, X=None, y=None) -> float:
        """Negative projector-space MRPE of the fitted model (higher is better)."""
        check_is_fitted(self, "result_")
        return -self.mrpe_projector_

    def predict(self, X):
        """Project plane-local object points: X is (plane_id, (n, 2) array)."""
        check_is_fitted(self, "result_")
        plane_id, pts = X
        pose = self.poses_[plane_id]
        obj3 = np.column_stack([as_points(pts, 2, "object points"), np.zeros(len(pts))])
        uv, _ = project_many(self.intrinsics_, pose.rotation, pose.translation, obj3)
        return uv
