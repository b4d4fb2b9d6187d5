"""Pinhole projection model, rigid transforms, fiducial planes, homographies.

Conventions used throughout the package:

* World and device coordinates are millimetres, image coordinates pixels.
* Pixel centres sit on the integer grid; "on-device" means
  ``0 <= u < width`` and ``0 <= v < height``.
* The projector frame has the optical centre at the origin and +z pointing
  out of the lens along the projection direction.
* ``RigidPose`` maps points *into* the frame that owns it:
  ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindProjectorError, DegenerateHomographyError
from .validation import as_float_array, as_points, check_finite, check_positive

_MIN_DEPTH = 1e-12


def polar_orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar factor of R)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def rotation_from_axis_angle(w) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    w = as_float_array(w, "axis-angle", (3,))
    theta = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + K
    K /= theta
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def rotation_from_euler_deg(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation from intrinsic yaw/pitch/roll angles in degrees.

    ``R = Ry(yaw) @ Rx(pitch) @ Rz(roll)``: yaw turns about the vertical
    (world y) axis, pitch tips about the horizontal (world x) axis, roll
    twists about the plane normal.
    """
    y, p, r = (math.radians(a) for a in (yaw, pitch, roll))
    cy, sy = math.cos(y), math.sin(y)
    cp, sp = math.cos(p), math.sin(p)
    cr, sr = math.cos(r), math.sin(r)
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    Rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return Ry @ Rx @ Rz


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels.

    No skew and no lens distortion anywhere in this package. ``cy`` may lie
    outside the panel for strongly off-axis projectors.
    """

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        check_positive("fx", self.fx)
        check_positive("fy", self.fy)
        check_finite("cx", self.cx)
        check_finite("cy", self.cy)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = as_float_array(K, "K", (3, 3))
        return cls(fx=float(K[0, 0]), fy=float(K[1, 1]), cx=float(K[0, 2]), cy=float(K[1, 2]))

    def to_json_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Intrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))


@dataclass(frozen=True)
class RigidPose:
    """Proper rigid transform ``x -> R @ x + t`` with an orthonormality guard.

    Arrays are copied and frozen at construction; composition chains stay
    orthonormal because :meth:`compose` re-projects onto SO(3) via the polar
    decomposition.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = as_float_array(self.rotation, "rotation", (3, 3)).copy()
        t = as_float_array(self.translation, "translation", (3,)).copy()
        err = float(np.abs(R.T @ R - np.eye(3)).max())
        if err > 1e-9:
            raise ValueError(
                f"rotation: not orthonormal within 1e-9 (deviation {err:.3e}); "
                "use RigidPose.from_matrix(..., orthonormalize=True) for noisy input"
            )
        if np.linalg.det(R) < 0:
            raise ValueError("rotation: determinant is negative")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t, orthonormalize: bool = False) -> "RigidPose":
        R = as_float_array(R, "rotation", (3, 3))
        if orthonormalize:
            R = polar_orthonormalize(R)
        return cls(R, as_float_array(t, "translation", (3,)))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return ``self after other``: first apply ``other``, then ``self``."""
        R = polar_orthonormalize(self.rotation @ other.rotation)
        t = self.rotation @ other.translation + self.translation
        return RigidPose(R, t)

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T.copy()
        return RigidPose(Rt, -Rt @ self.translation)

    def transform(self, points) -> np.ndarray:
        """Apply to a (3,) point or (n, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 3, "points")
        out = pts @ self.rotation.T + self.translation
        return out[0] if single else out

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RigidPose":
        R = np.asarray(d["rotation"], dtype=float).reshape(3, 3)
        return cls.from_matrix(R, d["translation"], orthonormalize=True)


@dataclass(frozen=True)
class PlaneFrame:
    """A finite planar fiducial: pose maps plane-local (x, y, 0) into world.

    ``extent`` is the physical (width, height) of the plane in mm, centred on
    the frame origin.
    """

    pose: RigidPose
    extent: tuple[float, float]

    def __post_init__(self):
        w, h = self.extent
        check_positive("extent width", w)
        check_positive("extent height", h)
        object.__setattr__(self, "extent", (float(w), float(h)))

    @property
    def normal(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation

    def to_world(self, local_xy) -> np.ndarray:
        pts = np.asarray(local_xy, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 2, "local points")
        pts3 = np.column_stack([pts, np.zeros(len(pts))])
        out = self.pose.transform(pts3)
        return out[0] if single else out

    def to_local(self, world_points) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (in-plane xy, out-of-plane z residual)."""
        pts = np.asarray(world_points, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 3, "world points")
        rel = (pts - self.pose.translation) @ self.pose.rotation
        xy, z = rel[:, :2], rel[:, 2]
        return (xy[0], float(z[0])) if single else (xy, z)

    def contains(self, local_xy, margin: float = 0.0):
        pts = as_points(local_xy, 2, "local points")
        hw, hh = self.extent[0] / 2.0 - margin, self.extent[1] / 2.0 - margin
        return (np.abs(pts[:, 0]) <= hw) & (np.abs(pts[:, 1]) <= hh)

    def intersect_ray(self, origin, direction):
        """Intersect a world ray with the infinite plane.

        Returns ``(t, local_xy, world_point)`` with ``t > 0`` along the ray,
        or ``None`` when the ray is parallel or points away.
        """
        o = as_float_array(origin, "origin", (3,))
        d = as_float_array(direction, "direction", (3,))
        n = self.normal
        denom = float(n @ d)
        if abs(denom) < 1e-15:
            return None
        t = float(n @ (self.pose.translation - o)) / denom
        if t <= _MIN_DEPTH:
            return None
        world = o + t * d
        local, _ = self.to_local(world)
        return t, local, world

    def to_json_dict(self) -> dict:
        return {"pose": self.pose.to_json_dict(), "extent_mm": list(self.extent)}


class RasterPlane:
    """A :class:`PlaneFrame` sampled on a regular raster (a scanner bed).

    Raster coordinates (x, y) have pixel centres on the integer grid with
    x = column, y = row; the raster is centred on the plane frame origin.
    The raster snaps the frame extent to a whole number of pixels.
    """

    def __init__(self, frame: PlaneFrame, dpi: float):
        self.frame = frame
        self.dpi = check_positive("dpi", dpi)
        self.pixel_pitch_mm = 25.4 / self.dpi
        self.width_px = max(1, int(round(frame.extent[0] / self.pixel_pitch_mm)))
        self.height_px = max(1, int(round(frame.extent[1] / self.pixel_pitch_mm)))
        # extent actually covered by whole pixels
        self.raster_extent = (self.width_px * self.pixel_pitch_mm, self.height_px * self.pixel_pitch_mm)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def local_to_raster(self, local_xy) -> np.ndarray:
        pts = np.asarray(local_xy, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 2, "local points")
        x = (pts[:, 0] + self.raster_extent[0] / 2.0) / self.pixel_pitch_mm - 0.5
        y = (pts[:, 1] + self.raster_extent[1] / 2.0) / self.pixel_pitch_mm - 0.5
        out = np.column_stack([x, y])
        return out[0] if single else out

    def raster_to_local(self, raster_xy) -> np.ndarray:
        pts = np.asarray(raster_xy, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 2, "raster points")
        a = (pts[:, 0] + 0.5) * self.pixel_pitch_mm - self.raster_extent[0] / 2.0
        b = (pts[:, 1] + 0.5) * self.pixel_pitch_mm - self.raster_extent[1] / 2.0
        out = np.column_stack([a, b])
        return out[0] if single else out

    def raster_to_world(self, raster_xy) -> np.ndarray:
        return self.frame.to_world(self.raster_to_local(raster_xy))

    def world_to_raster(self, world_points) -> np.ndarray:
        local, _ = self.frame.to_local(world_points)
        return self.local_to_raster(local)


def project(intrinsics: Intrinsics, pose: RigidPose, point) -> tuple[float, float]:
    """Project a world point to pixel coordinates.

    Raises :class:`BehindProjectorError` when the transformed point has
    non-positive depth; points at infinity are not representable.
    """
    p = pose.transform(as_float_array(point, "point", (3,)))
    if p[2] <= _MIN_DEPTH:
        raise BehindProjectorError(f"point has non-positive depth z'={p[2]:.6g}")
    u = intrinsics.fx * p[0] / p[2] + intrinsics.cx
    v = intrinsics.fy * p[1] / p[2] + intrinsics.cy
    return (float(u), float(v))


def project_many(intrinsics: Intrinsics, R: np.ndarray, t: np.ndarray, points: np.ndarray):
    """Vectorised projection; returns (uv (n,2), depths (n,)).

    Depths are clamped to a tiny positive value so optimisation residuals
    stay finite; callers that care must check the returned depths.
    """
    cam = points @ R.T + t
    z = np.maximum(cam[:, 2], _MIN_DEPTH)
    uv = np.empty((len(points), 2))
    uv[:, 0] = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    uv[:, 1] = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return uv, cam[:, 2]


def unproject_ray(intrinsics: Intrinsics, pose: RigidPose, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Pixel -> world ray ``(origin, unit direction)`` through the optical centre."""
    px = as_float_array(pixel, "pixel", (2,))
    d_cam = np.array(
        [(px[0] - intrinsics.cx) / intrinsics.fx, (px[1] - intrinsics.cy) / intrinsics.fy, 1.0]
    )
    Rt = pose.rotation.T
    origin = -Rt @ pose.translation
    direction = Rt @ d_cam
    return origin, direction / np.linalg.norm(direction)


@dataclass(frozen=True)
class Homography:
    """A 3x3 plane-to-plane projective map, canonically normalized.

    The matrix is scaled so its bottom-right entry is 1 unless that entry is
    nearly zero, in which case it is Frobenius-normalized with a sign fix.
    """

    matrix: np.ndarray

    def __post_init__(self):
        H = as_float_array(self.matrix, "homography", (3, 3)).copy()
        fro = float(np.linalg.norm(H))
        if fro == 0.0 or abs(np.linalg.det(H)) < 1e-15 * fro**3:
            raise ValueError("homography: matrix is singular")
        if abs(H[2, 2]) > 1e-12 * fro:
            H = H / H[2, 2]
        else:
            H = H / fro
            flat = H.ravel()
            lead = flat[np.argmax(np.abs(flat))]
            if lead < 0:
                H = -H
        H.flags.writeable = False
        object.__setattr__(self, "matrix", H)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = as_points(pts, 2, "points")
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.matrix.T
        out = hom[:, :2] / hom[:, 2:3]
        return out[0] if single else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return (pts - mean) * s, T


def estimate_homography(src_points, dst_points) -> tuple[Homography, float]:
    """DLT homography with Hartley normalization.

    ``src_points`` are plane-local 2D coordinates, ``dst_points`` the matching
    pixels. Returns the homography together with the mean symmetric transfer
    error over the inputs. Raises :class:`DegenerateHomographyError` for
    rank-deficient configurations (fewer than 4 points in general position).
    """
    src = as_points(src_points, 2, "src points", min_count=4)
    dst = as_points(dst_points, 2, "dst points", min_count=4)
    if len(src) != len(dst):
        raise ValueError("src and dst point counts differ")
    sn, Ts = _hartley_normalization(src)
    dn, Td = _hartley_normalization(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0] = -sn[:, 0]
    A[0::2, 1] = -sn[:, 1]
    A[0::2, 2] = -1.0
    A[0::2, 6] = dn[:, 0] * sn[:, 0]
    A[0::2, 7] = dn[:, 0] * sn[:, 1]
    A[0::2, 8] = dn[:, 0]
    A[1::2, 3] = -sn[:, 0]
    A[1::2, 4] = -sn[:, 1]
    A[1::2, 5] = -1.0
    A[1::2, 6] = dn[:, 1] * sn[:, 0]
    A[1::2, 7] = dn[:, 1] * sn[:, 1]
    A[1::2, 8] = dn[:, 1]
    _, s, Vt = np.linalg.svd(A)
    # the system must determine H up to scale: second-smallest singular value
    # of the design matrix must be well above the noise floor of exact zeros
    if s[min(2 * n, 9) - 2] < 1e-10 * s[0]:
        raise DegenerateHomographyError("rank-deficient design matrix (collinear or repeated points)")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    try:
        hom = Homography(H)
        inv = hom.inverse()
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise DegenerateHomographyError(f"singular homography estimate: {exc}") from exc
    fwd = np.linalg.norm(hom.apply(src) - dst, axis=1)
    bwd = np.linalg.norm(inv.apply(dst) - src, axis=1)
    err = float(0.5 * (fwd + bwd).mean())
    return hom, err
