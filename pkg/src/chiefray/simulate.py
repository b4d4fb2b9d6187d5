"""Synthetic optical bench: thin-lens projector, pinhole-array masks, scanner.

The bench world frame coincides with the projector frame (optical centre at
the origin, +z along the projection direction). A finite-aperture thin lens
sits in the z = 0 plane; the panel lies behind it at the image distance
conjugate to the focus plane, so every ray bundle from one pixel converges at
that pixel's conjugate point. Pinhole masks absorb everything except rays
passing within a hole radius of a pinhole centre, and surviving rays are
accumulated on the scanner raster.

Rendering uses a precomputed light-transport table: ray geometry does not
depend on the projected frame, so rays are traced once per bench and every
pattern frame becomes a weighted scatter-sum. Per-pinhole ray bundles are
importance-sampled inside the (padded) lens region that can reach the hole,
with weights expressed in the uniform-aperture measure, which keeps the
estimate unbiased while avoiding the astronomically wasteful naive hit rate
of roughly ``(hole area / mask cell area)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import BenchValidationError
from .geometry import Intrinsics, PlaneFrame, RasterPlane, RigidPose, rotation_from_euler_deg
from .graycode import PatternStack, generate_patterns
from .validation import as_float_array, check_positive

_PAD_FACTOR = 1.35  # padding of the per-hole lens disc; covers plane tilt
_DENSITY_PER_SAMPLE = 0.05  # target rays per scanner pixel per configured sample


@dataclass(frozen=True)
class ProjectorModel:
    """Thin-lens projector: panel geometry plus lens parameters (mm)."""

    width: int
    height: int
    pixel_pitch_mm: float
    lens_focal_length_mm: float
    aperture_diameter_mm: float
    focus_distance_mm: float
    image_plane_offset_mm: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("panel dimensions must be >= 1")
        check_positive("pixel_pitch_mm", self.pixel_pitch_mm)
        check_positive("lens_focal_length_mm", self.lens_focal_length_mm)
        check_positive("aperture_diameter_mm", self.aperture_diameter_mm)
        check_positive("focus_distance_mm", self.focus_distance_mm)
        if self.focus_distance_mm <= self.lens_focal_length_mm:
            raise ValueError("focus_distance_mm must exceed the focal length")
        ox, oy = self.image_plane_offset_mm
        object.__setattr__(self, "image_plane_offset_mm", (float(ox), float(oy)))

    @property
    def image_distance_mm(self) -> float:
        """Panel-to-lens distance conjugate to the focus plane."""
        return 1.0 / (1.0 / self.lens_focal_length_mm - 1.0 / self.focus_distance_mm)


def ground_truth_intrinsics(projector: ProjectorModel) -> Intrinsics:
    """Exact pinhole intrinsics of the chief-ray geometry."""
    d = projector.image_distance_mm
    f_px = d / projector.pixel_pitch_mm
    ox, oy = projector.image_plane_offset_mm
    cx = (projector.width - 1) / 2.0 + ox / projector.pixel_pitch_mm
    cy = (projector.height - 1) / 2.0 + oy / projector.pixel_pitch_mm
    return Intrinsics(fx=f_px, fy=f_px, cx=cx, cy=cy)


@dataclass(frozen=True)
class PinholeMask:
    """Regular pinhole grid on an absorbing plate.

    The grid is centred on the plate frame origin; hole (row, col) sits at
    plate-local ``((col - (cols-1)/2) * pitch, (row - (rows-1)/2) * pitch)``.
    """

    rows: int
    cols: int
    pitch_mm: float
    hole_diameter_mm: float
    frame: PlaneFrame
    thickness_mm: float = 0.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("pinhole grid needs at least 2x2 holes")
        check_positive("pitch_mm", self.pitch_mm)
        if not 0.0 < self.hole_diameter_mm < self.pitch_mm:
            raise ValueError("hole_diameter_mm must lie in (0, pitch_mm)")
        if self.thickness_mm < 0.0:
            raise ValueError("thickness_mm must be >= 0")

    def hole_centers_local(self) -> np.ndarray:
        """(rows*cols, 2) plate-local hole centres, row-major order."""
        r = np.arange(self.rows)
        c = np.arange(self.cols)
        cc, rr = np.meshgrid(c, r)
        x = (cc.ravel() - (self.cols - 1) / 2.0) * self.pitch_mm
        y = (rr.ravel() - (self.rows - 1) / 2.0) * self.pitch_mm
        return np.column_stack([x, y])

    def hole_center_local(self, row: int, col: int) -> np.ndarray:
        return np.array(
            [
                (col - (self.cols - 1) / 2.0) * self.pitch_mm,
                (row - (self.rows - 1) / 2.0) * self.pitch_mm,
            ]
        )


@dataclass(frozen=True)
class BenchConfig:
    """Complete synthetic bench geometry plus sampling controls.

    ``scanner_psf_px`` models the mild blur of the scattering screen film on
    the scanner bed as an isotropic Gaussian (scanner pixels); it also tames
    Monte-Carlo shot noise in rendered blobs.
    """

    projector: ProjectorModel
    masks: tuple
    scanner_frame: PlaneFrame
    scanner_dpi: float
    rng_seed: int = 0
    rays_per_pixel_sample: int = 256
    scanner_psf_px: float = 0.8
    decode_contrast_threshold: float = 0.10
    decode_bit_threshold: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        check_positive("scanner_dpi", self.scanner_dpi)
        if self.rays_per_pixel_sample < 8:
            raise ValueError("rays_per_pixel_sample must be >= 8")
        if self.scanner_psf_px < 0:
            raise ValueError("scanner_psf_px must be >= 0")
        if not 0.0 <= self.decode_contrast_threshold < 1.0:
            raise ValueError("decode_contrast_threshold must lie in [0, 1)")
        if not 0.0 < self.decode_bit_threshold < 1.0:
            raise ValueError("decode_bit_threshold must lie in (0, 1)")

    def scanner_raster(self) -> RasterPlane:
        return RasterPlane(self.scanner_frame, self.scanner_dpi)

    def to_json_dict(self) -> dict:
        return {
            "rng_seed": int(self.rng_seed),
            "rays_per_pixel_sample": int(self.rays_per_pixel_sample),
            "projector": {
                "width": self.projector.width,
                "height": self.projector.height,
                "pixel_pitch_mm": self.projector.pixel_pitch_mm,
                "image_plane_offset_mm": list(self.projector.image_plane_offset_mm),
                "lens_focal_length_mm": self.projector.lens_focal_length_mm,
                "aperture_diameter_mm": self.projector.aperture_diameter_mm,
                "focus_distance_mm": self.projector.focus_distance_mm,
            },
            "masks": [
                {
                    "rows": m.rows,
                    "cols": m.cols,
                    "pitch_mm": m.pitch_mm,
                    "hole_diameter_mm": m.hole_diameter_mm,
                    "thickness_mm": m.thickness_mm,
                    "frame": _frame_to_json(m.frame),
                }
                for m in self.masks
            ],
            "scanner": {
                "dpi": self.scanner_dpi,
                "psf_px": self.scanner_psf_px,
                "frame": _frame_to_json(self.scanner_frame),
            },
            "decode": {
                "contrast_threshold": self.decode_contrast_threshold,
                "bit_threshold": self.decode_bit_threshold,
            },
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BenchConfig":
        try:
            proj = d["projector"]
            projector = ProjectorModel(
                width=int(proj["width"]),
                height=int(proj["height"]),
                pixel_pitch_mm=float(proj["pixel_pitch_mm"]),
                image_plane_offset_mm=tuple(proj.get("image_plane_offset_mm", (0.0, 0.0))),
                lens_focal_length_mm=float(proj["lens_focal_length_mm"]),
                aperture_diameter_mm=float(proj["aperture_diameter_mm"]),
                focus_distance_mm=float(proj["focus_distance_mm"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BenchValidationError(f"projector: {exc}") from exc
        masks = []
        for i, m in enumerate(d.get("masks", [])):
            try:
                masks.append(
                    PinholeMask(
                        rows=int(m["rows"]),
                        cols=int(m["cols"]),
                        pitch_mm=float(m["pitch_mm"]),
                        hole_diameter_mm=float(m["hole_diameter_mm"]),
                        thickness_mm=float(m.get("thickness_mm", 0.0)),
                        frame=_frame_from_json(m["frame"], f"masks[{i}].frame"),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise BenchValidationError(f"masks[{i}]: {exc}") from exc
        try:
            scanner = d["scanner"]
            frame = _frame_from_json(scanner["frame"], "scanner.frame")
            dpi = float(scanner["dpi"])
            psf = float(scanner.get("psf_px", 0.8))
        except (KeyError, TypeError, ValueError) as exc:
            raise BenchValidationError(f"scanner: {exc}") from exc
        try:
            return cls(
                projector=projector,
                masks=tuple(masks),
                scanner_frame=frame,
                scanner_dpi=dpi,
                rng_seed=int(d.get("rng_seed", 0)),
                rays_per_pixel_sample=int(d.get("rays_per_pixel_sample", 256)),
                scanner_psf_px=psf,
                decode_contrast_threshold=float(d.get("decode", {}).get("contrast_threshold", 0.10)),
                decode_bit_threshold=float(d.get("decode", {}).get("bit_threshold", 0.05)),
            )
        except (TypeError, ValueError) as exc:
            raise BenchValidationError(str(exc)) from exc

    def validate(self) -> None:
        """Check geometric invariants; raises :class:`BenchValidationError`."""
        planes = [("scanner", self.scanner_frame)] + [
            (f"masks[{i}]", m.frame) for i, m in enumerate(self.masks)
        ]
        for i in range(len(planes)):
            for j in range(i + 1, len(planes)):
                ni, nj = planes[i][1].normal, planes[j][1].normal
                ang = math.degrees(math.acos(min(1.0, abs(float(ni @ nj)))))
                if ang < 1.0:
                    raise BenchValidationError(
                        f"{planes[i][0]} and {planes[j][0]} are parallel within 1 degree "
                        f"({ang:.3f} deg); parallel planes add no constraints"
                    )
        for i, mask in enumerate(self.masks):
            holes = mask.frame.to_world(mask.hole_centers_local())
            if np.any(holes[:, 2] <= 0):
                raise BenchValidationError(f"masks[{i}]: pinholes behind the lens plane")
            for j, other in enumerate(self.masks):
                if i == j:
                    continue
                if _segment_hits_plate(np.zeros(3), holes, other.frame).any():
                    raise BenchValidationError(
                        f"masks[{i}] is occluded by masks[{j}] from the optical centre"
                    )
            for h in holes:
                hit = self.scanner_frame.intersect_ray(np.zeros(3), h / np.linalg.norm(h))
                if hit is None:
                    raise BenchValidationError(
                        f"masks[{i}]: chief rays never reach the scanner plane"
                    )


def _frame_to_json(frame: PlaneFrame) -> dict:
    d = frame.pose.to_json_dict()
    d["extent_mm"] = list(frame.extent)
    return d


def _frame_from_json(d: dict, path: str) -> PlaneFrame:
    try:
        extent = tuple(float(x) for x in d["extent_mm"])
        if "rotation" in d:
            pose = RigidPose.from_json_dict(d)
        else:
            pose = RigidPose(
                rotation_from_euler_deg(
                    yaw=float(d.get("yaw_deg", 0.0)),
                    pitch=float(d.get("pitch_deg", 0.0)),
                    roll=float(d.get("roll_deg", 0.0)),
                ),
                as_float_array(d["center_mm"], f"{path}.center_mm", (3,)),
            )
        return PlaneFrame(pose=pose, extent=extent)
    except (KeyError, TypeError, ValueError) as exc:
        raise BenchValidationError(f"{path}: {exc}") from exc


def _segment_hits_plate(origin: np.ndarray, targets: np.ndarray, frame: PlaneFrame) -> np.ndarray:
    """True where segment origin->target crosses the finite plate strictly inside."""
    n = frame.normal
    d = targets - origin
    denom = d @ n
    out = np.zeros(len(targets), dtype=bool)
    ok = np.abs(denom) > 1e-15
    s = np.zeros(len(targets))
    s[ok] = ((frame.origin - origin) @ n) / denom[ok]
    crossing = ok & (s > 1e-9) & (s < 1.0 - 1e-9)
    if crossing.any():
        pts = origin + s[crossing, None] * d[crossing]
        local, _ = frame.to_local(pts)
        out[crossing] = frame.contains(local)
    return out


@dataclass
class ScanImage:
    """Scanner-plane irradiance raster (non-negative, row-major)."""

    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _concentric_disc(sq: np.ndarray) -> np.ndarray:
    """Shirley-Chiu area-preserving map from the unit square to the unit disc."""
    a = 2.0 * sq[..., 0] - 1.0
    b = 2.0 * sq[..., 1] - 1.0
    use_a = np.abs(a) > np.abs(b)
    safe_a = np.where(a == 0.0, 1.0, a)
    safe_b = np.where(b == 0.0, 1.0, b)
    r = np.where(use_a, a, b)
    phi = np.where(use_a, (np.pi / 4.0) * (b / safe_a), (np.pi / 2.0) - (np.pi / 4.0) * (a / safe_b))
    phi = np.where((a == 0.0) & (b == 0.0), 0.0, phi)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


class Simulator:
    """Caches the transport table for one bench and renders pattern frames."""

    def __init__(self, bench: BenchConfig, samples_per_pixel: int | None = None):
        bench.validate()
        self.bench = bench
        self.samples_per_pixel = int(samples_per_pixel or bench.rays_per_pixel_sample)
        if self.samples_per_pixel < 8:
            raise ValueError("samples_per_pixel must be >= 8")
        self.intrinsics = ground_truth_intrinsics(bench.projector)
        self.raster = bench.scanner_raster()
        p = bench.projector
        self._image_distance = p.image_distance_mm
        self._magnification = -p.focus_distance_mm / self._image_distance
        self._transport = None
        self._gt_arrays = None

    # panel/conjugate geometry -------------------------------------------------

    def conjugate_points(self, pixels: np.ndarray) -> np.ndarray:
        """Conjugate (focus-plane) points of pixel coordinates (n, 2)."""
        p = self.bench.projector
        ox, oy = p.image_plane_offset_mm
        xs = ox - (pixels[:, 0] - (p.width - 1) / 2.0) * p.pixel_pitch_mm
        ys = oy - (pixels[:, 1] - (p.height - 1) / 2.0) * p.pixel_pitch_mm
        out = np.empty((len(pixels), 3))
        out[:, 0] = self._magnification * xs
        out[:, 1] = self._magnification * ys
        out[:, 2] = p.focus_distance_mm
        return out

    def chief_pixels(self, world_points: np.ndarray) -> np.ndarray:
        """Pixels whose chief rays pass through the given world points."""
        K = self.intrinsics
        pts = np.atleast_2d(np.asarray(world_points, dtype=float))
        z = pts[:, 2]
        uv = np.empty((len(pts), 2))
        uv[:, 0] = K.fx * pts[:, 0] / z + K.cx
        uv[:, 1] = K.fy * pts[:, 1] / z + K.cy
        return uv

    # ray tracing ---------------------------------------------------------------

    def _scanner_hits(self, origins: np.ndarray, dirs: np.ndarray):
        """Distances and plane-local hits on the scanner; s = +inf when missed."""
        frame = self.bench.scanner_frame
        n = frame.normal
        denom = dirs @ n
        s = np.full(len(origins), np.inf)
        ok = np.abs(denom) > 1e-15
        s[ok] = ((frame.origin - origins[ok]) @ n) / denom[ok]
        s[s <= 1e-9] = np.inf
        return s

    def _apply_masks(self, origins: np.ndarray, dirs: np.ndarray, s_scan: np.ndarray) -> np.ndarray:
        """Alive flags after absorbing rays on every mask plate before the scanner."""
        alive = np.isfinite(s_scan)
        for mask in self.bench.masks:
            frame = mask.frame
            n = frame.normal
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                s = ((frame.origin - origins) @ n) / denom
            hits = alive & (np.abs(denom) > 1e-15) & (s > 1e-9) & (s < s_scan - 1e-9)
            if not hits.any():
                continue
            idx = np.flatnonzero(hits)
            X = origins[idx] + s[idx, None] * dirs[idx]
            rel = (X - frame.origin) @ frame.pose.rotation
            a, b = rel[:, 0], rel[:, 1]
            on_plate = (np.abs(a) <= frame.extent[0] / 2.0) & (np.abs(b) <= frame.extent[1] / 2.0)
            col = np.clip(np.round(a / mask.pitch_mm + (mask.cols - 1) / 2.0), 0, mask.cols - 1)
            row = np.clip(np.round(b / mask.pitch_mm + (mask.rows - 1) / 2.0), 0, mask.rows - 1)
            da = a - (col - (mask.cols - 1) / 2.0) * mask.pitch_mm
            db = b - (row - (mask.rows - 1) / 2.0) * mask.pitch_mm
            rho2 = (mask.hole_diameter_mm / 2.0) ** 2
            passes = da * da + db * db <= rho2
            if mask.thickness_mm > 0.0:
                d_local = dirs[idx] @ frame.pose.rotation
                dz = np.abs(d_local[:, 2])
                drift = mask.thickness_mm / np.maximum(dz, 1e-12)
                ea = da + d_local[:, 0] * drift
                eb = db + d_local[:, 1] * drift
                passes &= ea * ea + eb * eb <= rho2
                passes &= dz > 1e-12
            alive[idx[on_plate & ~passes]] = False
        return alive

    def _mask_holes_world(self, mask: PinholeMask) -> np.ndarray:
        return mask.frame.to_world(mask.hole_centers_local())

    def _cell_area_px(self, hole_world: np.ndarray, chief_px: np.ndarray) -> float:
        """Scanner-raster area covered by one panel pixel seen through a hole.

        The pixel-to-scanner map through a fixed hole sends pixel p to the
        scanner intersection of the line from the pixel's conjugate point
        through the hole centre; its Jacobian determinant sets how many rays
        one beamlet needs for uniform coverage.
        """
        frame = self.bench.scanner_frame
        n = frame.normal
        base = np.array([chief_px, chief_px + (1.0, 0.0), chief_px + (0.0, 1.0)])
        C = self.conjugate_points(base)
        D = hole_world[None, :] - C
        denom = D @ n
        if np.any(np.abs(denom) < 1e-15):
            return 1.0
        s = ((frame.origin - C) @ n) / denom
        hits = C + s[:, None] * D
        local, _ = frame.to_local(hits)
        rxy = self.raster.local_to_raster(local)
        J = np.array([rxy[1] - rxy[0], rxy[2] - rxy[0]])
        area = abs(float(np.linalg.det(J)))
        return area if np.isfinite(area) and area > 1e-6 else 1.0

    def _beamlet_sides(self, cell_area_px: float) -> int:
        """Stratification grid side so ray density tracks the sample budget.

        Density is floored so blobs stay contiguous (Monte-Carlo shot noise
        must not punch holes through the thresholded support) even under
        small sample budgets.
        """
        density = max(_DENSITY_PER_SAMPLE * self.samples_per_pixel, 8.0)
        pass_fraction = 1.0 / (_PAD_FACTOR * _PAD_FACTOR)
        n = density * cell_area_px / pass_fraction
        return int(np.clip(math.ceil(math.sqrt(max(n, 4.0))), 2, 24))

    @property
    def transport(self):
        if self._transport is None:
            self._build_transport()
        return self._transport

    def _build_transport(self) -> None:
        bench = self.bench
        p = bench.projector
        aperture_r = p.aperture_diameter_mm / 2.0
        z_f = p.focus_distance_mm
        raster = self.raster
        npix_proj = p.width * p.height

        scan_parts, proj_parts, w_parts, hole_parts = [], [], [], []
        hole_gid = 0
        for mask_i, mask in enumerate(bench.masks):
            holes = self._mask_holes_world(mask)
            chiefs = self.chief_pixels(holes)
            rho = mask.hole_diameter_mm / 2.0
            for k in range(len(holes)):
                gid = hole_gid + k
                h = holes[k]
                t_h = z_f / (z_f - h[2]) if abs(z_f - h[2]) > 1e-9 else None
                if t_h is None:
                    continue
                scale = abs((1.0 - t_h) * self._magnification) * p.pixel_pitch_mm
                r_pad = _PAD_FACTOR * abs(t_h) * rho
                # candidates also cover the half-pixel emitter spread
                r_cand = (aperture_r + r_pad) / scale + 0.75
                n_side = self._beamlet_sides(self._cell_area_px(h, chiefs[k]))
                n_samp = n_side * n_side
                uc, vc = chiefs[k]
                u_lo, u_hi = int(math.ceil(uc - r_cand)), int(math.floor(uc + r_cand))
                v_lo, v_hi = int(math.ceil(vc - r_cand)), int(math.floor(vc + r_cand))
                u_lo, u_hi = max(0, u_lo), min(p.width - 1, u_hi)
                v_lo, v_hi = max(0, v_lo), min(p.height - 1, v_hi)
                if u_lo > u_hi or v_lo > v_hi:
                    continue
                uu, vv = np.meshgrid(np.arange(u_lo, u_hi + 1), np.arange(v_lo, v_hi + 1))
                uu, vv = uu.ravel(), vv.ravel()
                keep = (uu - uc) ** 2 + (vv - vc) ** 2 <= r_cand * r_cand
                uu, vv = uu[keep], vv[keep]
                if len(uu) == 0:
                    continue
                pixels = np.column_stack([uu, vv]).astype(float)
                rng = np.random.default_rng(
                    np.random.SeedSequence((int(bench.rng_seed) & 0xFFFFFFFF, 101, mask_i, k))
                )
                # pixels are extended emitters: jitter sub-pixel emitter
                # positions, then importance-sample the lens region feeding
                # the hole for that emitter
                emitter = rng.random((len(uu), n_samp, 2)) - 0.5
                C_ray = self.conjugate_points(
                    (pixels[:, None, :] + emitter).reshape(-1, 2)
                ).reshape(len(uu), n_samp, 3)
                l_hat = (1.0 - t_h) * C_ray + t_h * h  # z component vanishes
                jit = rng.random((len(uu), n_side, n_side, 2))
                grid = np.stack(
                    np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij"), axis=-1
                )
                sq = (grid[None] + jit) / n_side
                disc = _concentric_disc(sq.reshape(len(uu), n_samp, 2)) * r_pad
                L = l_hat[..., :2] + disc
                in_aperture = (L**2).sum(axis=-1) <= aperture_r * aperture_r
                flat = np.flatnonzero(in_aperture.ravel())
                if len(flat) == 0:
                    continue
                pix_idx = flat // n_samp
                origins = np.zeros((len(flat), 3))
                origins[:, :2] = L.reshape(-1, 2)[flat]
                dirs = C_ray.reshape(-1, 3)[flat] - origins
                s_scan = self._scanner_hits(origins, dirs)
                alive = self._apply_masks(origins, dirs, s_scan)
                if not alive.any():
                    continue
                idx = np.flatnonzero(alive)
                hits = origins[idx] + s_scan[idx, None] * dirs[idx]
                local, _ = bench.scanner_frame.to_local(hits)
                rxy = raster.local_to_raster(local)
                ix = np.round(rxy[:, 0]).astype(np.int64)
                iy = np.round(rxy[:, 1]).astype(np.int64)
                in_raster = (ix >= 0) & (ix < raster.width_px) & (iy >= 0) & (iy < raster.height_px)
                if not in_raster.any():
                    continue
                idx = idx[in_raster]
                scan_flat = iy[in_raster] * raster.width_px + ix[in_raster]
                proj_flat = (vv[pix_idx[idx]] * p.width + uu[pix_idx[idx]]).astype(np.int64)
                weight = (r_pad * r_pad) / (aperture_r * aperture_r) / n_samp
                key = scan_flat * npix_proj + proj_flat
                order = np.argsort(key, kind="stable")
                key = key[order]
                uniq, starts = np.unique(key, return_index=True)
                w_sum = np.add.reduceat(np.full(len(key), weight), starts)
                scan_parts.append((uniq // npix_proj).astype(np.int64))
                proj_parts.append((uniq % npix_proj).astype(np.int32))
                w_parts.append(w_sum)
                hole_parts.append(np.full(len(uniq), gid, dtype=np.int32))
            hole_gid += len(holes)

        if scan_parts:
            scan_idx = np.concatenate(scan_parts)
            proj_idx = np.concatenate(proj_parts)
            weights = np.concatenate(w_parts)
            holes_ids = np.concatenate(hole_parts)
            order = np.lexsort((proj_idx, scan_idx))
            scan_idx, proj_idx = scan_idx[order], proj_idx[order]
            weights, holes_ids = weights[order], holes_ids[order]
        else:
            scan_idx = np.empty(0, dtype=np.int64)
            proj_idx = np.empty(0, dtype=np.int32)
            weights = np.empty(0, dtype=float)
            holes_ids = np.empty(0, dtype=np.int32)
        self._transport = {
            "scan": scan_idx,
            "proj": proj_idx,
            "w": weights,
            "hole": holes_ids,
            "n_scan": raster.width_px * raster.height_px,
            "n_proj": npix_proj,
        }

    # rendering ------------------------------------------------------------------

    def render(self, frame: np.ndarray) -> ScanImage:
        """Render one binary pattern frame to scanner irradiance."""
        p = self.bench.projector
        frame = np.asarray(frame)
        if frame.shape != (p.height, p.width):
            raise ValueError(f"frame shape {frame.shape} does not match panel ({p.height}, {p.width})")
        lit = frame.ravel().astype(float)
        if not self.bench.masks:
            return self._render_direct(lit)
        t = self.transport
        vals = t["w"] * lit[t["proj"]]
        img = np.bincount(t["scan"], weights=vals, minlength=t["n_scan"])
        img = img.reshape(self.raster.shape)
        if self.bench.scanner_psf_px > 0:
            img = ndimage.gaussian_filter(img, self.bench.scanner_psf_px)
        return ScanImage(img.astype(np.float32))

    def _render_direct(self, lit_flat: np.ndarray, chunk: int = 20000) -> ScanImage:
        """Per-pixel full-aperture sampling; used when no masks are present."""
        p = self.bench.projector
        aperture_r = p.aperture_diameter_mm / 2.0
        n_side = max(2, int(round(math.sqrt(self.samples_per_pixel))))
        n_samp = n_side * n_side
        raster = self.raster
        acc = np.zeros(raster.width_px * raster.height_px)
        lit_idx = np.flatnonzero(lit_flat > 0)
        rng = np.random.default_rng(np.random.SeedSequence((int(self.bench.rng_seed) & 0xFFFFFFFF, 313)))
        grid = np.stack(np.meshgrid(np.arange(n_side), np.arange(n_side), indexing="ij"), axis=-1)
        for start in range(0, len(lit_idx), chunk):
            block = lit_idx[start : start + chunk]
            pixels = np.column_stack([block % p.width, block // p.width]).astype(float)
            C = self.conjugate_points(pixels)
            jit = rng.random((len(block), n_side, n_side, 2))
            sq = (grid[None] + jit) / n_side
            disc = _concentric_disc(sq.reshape(len(block), n_samp, 2)) * aperture_r
            origins = np.zeros((len(block) * n_samp, 3))
            origins[:, :2] = disc.reshape(-1, 2)
            dirs = np.repeat(C, n_samp, axis=0) - origins
            s_scan = self._scanner_hits(origins, dirs)
            alive = self._apply_masks(origins, dirs, s_scan)
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                continue
            hits = origins[idx] + s_scan[idx, None] * dirs[idx]
            local, _ = self.bench.scanner_frame.to_local(hits)
            rxy = raster.local_to_raster(local)
            ix = np.round(rxy[:, 0]).astype(np.int64)
            iy = np.round(rxy[:, 1]).astype(np.int64)
            ok = (ix >= 0) & (ix < raster.width_px) & (iy >= 0) & (iy < raster.height_px)
            w = lit_flat[np.repeat(block, n_samp)[idx[ok]]] / n_samp
            np.add.at(acc, iy[ok] * raster.width_px + ix[ok], w)
        acc = acc.reshape(raster.shape)
        if self.bench.scanner_psf_px > 0:
            acc = ndimage.gaussian_filter(acc, self.bench.scanner_psf_px)
        return ScanImage(acc.astype(np.float32))

    # ground truth ----------------------------------------------------------------

    def ground_truth(self) -> "GroundTruth":
        if self._gt_arrays is None:
            self._gt_arrays = self._build_ground_truth()
        return self._gt_arrays

    def _build_ground_truth(self) -> "GroundTruth":
        bench = self.bench
        p = bench.projector
        rows_ = []
        offset = 0
        for mask_i, mask in enumerate(bench.masks):
            holes_local = mask.hole_centers_local()
            holes = mask.frame.to_world(holes_local)
            chiefs = self.chief_pixels(holes)
            on_device = (
                (chiefs[:, 0] >= 0)
                & (chiefs[:, 0] < p.width)
                & (chiefs[:, 1] >= 0)
                & (chiefs[:, 1] < p.height)
                & (holes[:, 2] > 0)
            )
            occluded = np.zeros(len(holes), dtype=bool)
            for j, other in enumerate(bench.masks):
                if j != mask_i:
                    occluded |= _segment_hits_plate(np.zeros(3), holes, other.frame)
            scan_local = np.full((len(holes), 2), np.nan)
            scan_raster = np.full((len(holes), 2), np.nan)
            reaches = np.zeros(len(holes), dtype=bool)
            for k, h in enumerate(holes):
                hit = bench.scanner_frame.intersect_ray(np.zeros(3), h / np.linalg.norm(h))
                if hit is None:
                    continue
                t, local, _ = hit
                if t <= np.linalg.norm(h):
                    continue  # scanner in front of the mask along this ray
                rxy = self.raster.local_to_raster(local)
                inside = (
                    0 <= rxy[0] < self.raster.width_px and 0 <= rxy[1] < self.raster.height_px
                )
                scan_local[k] = local
                scan_raster[k] = rxy
                reaches[k] = inside
            visible = on_device & ~occluded & reaches
            rr, cc = np.divmod(np.arange(len(holes)), mask.cols)
            rows_.append(
                dict(
                    gid=offset + np.arange(len(holes)),
                    mask_id=np.full(len(holes), mask_i),
                    row=rr,
                    col=cc,
                    world=holes,
                    chief=chiefs,
                    scan_local=scan_local,
                    scan_raster=scan_raster,
                    visible=visible,
                )
            )
            offset += len(holes)
        table = ChiefRayTable(
            gid=np.concatenate([r["gid"] for r in rows_]) if rows_ else np.empty(0, int),
            mask_id=np.concatenate([r["mask_id"] for r in rows_]) if rows_ else np.empty(0, int),
            row=np.concatenate([r["row"] for r in rows_]) if rows_ else np.empty(0, int),
            col=np.concatenate([r["col"] for r in rows_]) if rows_ else np.empty(0, int),
            world=np.concatenate([r["world"] for r in rows_]) if rows_ else np.empty((0, 3)),
            chief_px=np.concatenate([r["chief"] for r in rows_]) if rows_ else np.empty((0, 2)),
            scan_local_mm=np.concatenate([r["scan_local"] for r in rows_]) if rows_ else np.empty((0, 2)),
            scan_raster=np.concatenate([r["scan_raster"] for r in rows_]) if rows_ else np.empty((0, 2)),
            visible=np.concatenate([r["visible"] for r in rows_]) if rows_ else np.empty(0, bool),
        )

        n_scan = self.raster.width_px * self.raster.height_px
        dom_u = np.full(n_scan, -1, dtype=np.int32)
        dom_v = np.full(n_scan, -1, dtype=np.int32)
        dom_hole = np.full(n_scan, -1, dtype=np.int32)
        u_min = np.full(n_scan, np.iinfo(np.int32).max, dtype=np.int32)
        u_max = np.full(n_scan, -1, dtype=np.int32)
        v_min = np.full(n_scan, np.iinfo(np.int32).max, dtype=np.int32)
        v_max = np.full(n_scan, -1, dtype=np.int32)
        if bench.masks:
            t = self.transport
            if len(t["scan"]):
                w_px = p.width
                u = (t["proj"] % w_px).astype(np.int32)
                v = (t["proj"] // w_px).astype(np.int32)
                # aggregate weights per (scan, proj) across holes
                key = t["scan"] * np.int64(t["n_proj"]) + t["proj"]
                order = np.argsort(key, kind="stable")
                uniq, starts = np.unique(key[order], return_index=True)
                w_agg = np.add.reduceat(t["w"][order], starts)
                scan_a = (uniq // t["n_proj"]).astype(np.int64)
                proj_a = (uniq % t["n_proj"]).astype(np.int64)
                pick = np.lexsort((proj_a, -w_agg, scan_a))
                first = np.ones(len(pick), dtype=bool)
                sorted_scan = scan_a[pick]
                first[1:] = sorted_scan[1:] != sorted_scan[:-1]
                sel = pick[first]
                dom_u[scan_a[sel]] = (proj_a[sel] % w_px).astype(np.int32)
                dom_v[scan_a[sel]] = (proj_a[sel] // w_px).astype(np.int32)
                np.minimum.at(u_min, t["scan"], u)
                np.maximum.at(u_max, t["scan"], u)
                np.minimum.at(v_min, t["scan"], v)
                np.maximum.at(v_max, t["scan"], v)
                if bench.scanner_psf_px > 0:
                    # measurements mix rays within the PSF support; widen the
                    # per-pixel contributor boxes accordingly
                    size = 2 * int(math.ceil(3.0 * bench.scanner_psf_px)) + 1
                    shape2 = self.raster.shape
                    for arr, op in ((u_min, "min"), (v_min, "min"), (u_max, "max"), (v_max, "max")):
                        img2 = arr.reshape(shape2)
                        if op == "min":
                            filt = ndimage.minimum_filter(img2, size=size, mode="nearest")
                        else:
                            filt = ndimage.maximum_filter(img2, size=size, mode="nearest")
                        arr[:] = filt.ravel()
                # dominant hole per scanner pixel
                key_h = t["scan"] * np.int64(len(table.gid) + 1) + t["hole"]
                order_h = np.argsort(key_h, kind="stable")
                uniq_h, starts_h = np.unique(key_h[order_h], return_index=True)
                wh = np.add.reduceat(t["w"][order_h], starts_h)
                scan_h = (uniq_h // (len(table.gid) + 1)).astype(np.int64)
                hole_h = (uniq_h % (len(table.gid) + 1)).astype(np.int64)
                pick_h = np.lexsort((hole_h, -wh, scan_h))
                first_h = np.ones(len(pick_h), dtype=bool)
                ss = scan_h[pick_h]
                first_h[1:] = ss[1:] != ss[:-1]
                sel_h = pick_h[first_h]
                dom_hole[scan_h[sel_h]] = hole_h[sel_h].astype(np.int32)
        shape = self.raster.shape
        return GroundTruth(
            intrinsics=self.intrinsics,
            table=table,
            dominant_u=dom_u.reshape(shape),
            dominant_v=dom_v.reshape(shape),
            dominant_hole=dom_hole.reshape(shape),
            u_min=u_min.reshape(shape),
            u_max=u_max.reshape(shape),
            v_min=v_min.reshape(shape),
            v_max=v_max.reshape(shape),
        )


@dataclass
class ChiefRayTable:
    """Per-pinhole analytic ground truth (one entry per hole, visible or not)."""

    gid: np.ndarray
    mask_id: np.ndarray
    row: np.ndarray
    col: np.ndarray
    world: np.ndarray
    chief_px: np.ndarray
    scan_local_mm: np.ndarray
    scan_raster: np.ndarray
    visible: np.ndarray

    def __len__(self) -> int:
        return len(self.gid)


@dataclass
class GroundTruth:
    """Oracle channels exported by the simulator for verification."""

    intrinsics: Intrinsics
    table: ChiefRayTable
    dominant_u: np.ndarray
    dominant_v: np.ndarray
    dominant_hole: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray


def trace_ray(bench: BenchConfig, pixel, lens_sample):
    """Trace one ray from a panel pixel through one lens point.

    ``lens_sample`` is a 2D point in the aperture disc (mm). Returns the
    terminal surface as ``(plane_id, world_point)`` where plane_id is
    ``"maskN"`` for an absorbing plate hit or ``"scanner"``, or ``None`` when
    the ray escapes every surface.
    """
    p = bench.projector
    L = as_float_array(lens_sample, "lens_sample", (2,))
    if float(L @ L) > (p.aperture_diameter_mm / 2.0) ** 2 + 1e-12:
        raise ValueError("lens_sample lies outside the aperture")
    sim = Simulator.__new__(Simulator)  # lightweight: only geometry helpers needed
    sim.bench = bench
    sim.intrinsics = ground_truth_intrinsics(p)
    sim._image_distance = p.image_distance_mm
    sim._magnification = -p.focus_distance_mm / sim._image_distance
    sim.raster = bench.scanner_raster()
    C = sim.conjugate_points(np.asarray([pixel], dtype=float))[0]
    origin = np.array([L[0], L[1], 0.0])
    direction = C - origin

    events = []  # (s, plane_id, point, absorbed)
    for i, mask in enumerate(bench.masks):
        frame = mask.frame
        denom = float(frame.normal @ direction)
        if abs(denom) < 1e-15:
            continue
        s = float(frame.normal @ (frame.origin - origin)) / denom
        if s <= 1e-9:
            continue
        point = origin + s * direction
        local, _ = frame.to_local(point)
        if not frame.contains(local.reshape(1, 2))[0]:
            continue
        col = int(np.clip(round(local[0] / mask.pitch_mm + (mask.cols - 1) / 2.0), 0, mask.cols - 1))
        row = int(np.clip(round(local[1] / mask.pitch_mm + (mask.rows - 1) / 2.0), 0, mask.rows - 1))
        center = mask.hole_center_local(row, col)
        d2 = float((local[0] - center[0]) ** 2 + (local[1] - center[1]) ** 2)
        rho = mask.hole_diameter_mm / 2.0
        passes = d2 <= rho * rho
        if passes and mask.thickness_mm > 0.0:
            d_local = direction @ frame.pose.rotation
            dz = abs(float(d_local[2]))
            if dz < 1e-12:
                passes = False
            else:
                drift = mask.thickness_mm / dz
                ea = local[0] - center[0] + d_local[0] * drift
                eb = local[1] - center[1] + d_local[1] * drift
                passes = ea * ea + eb * eb <= rho * rho
        events.append((s, f"mask{i}", point, not passes))
    hit = bench.scanner_frame.intersect_ray(origin, direction)
    if hit is not None:
        t, local, point = hit
        rxy = sim.raster.local_to_raster(local)
        inside = 0 <= rxy[0] < sim.raster.width_px and 0 <= rxy[1] < sim.raster.height_px
        if inside:
            events.append((t, "scanner", point, True))
    for s, plane_id, point, stops in sorted(events, key=lambda e: e[0]):
        if stops:
            return plane_id, point
    return None


def render_scan(bench_or_sim, frame) -> ScanImage:
    """Render one pattern frame; accepts a bench config or a cached Simulator."""
    sim = bench_or_sim if isinstance(bench_or_sim, Simulator) else Simulator(bench_or_sim)
    return sim.render(frame)


class _LazyScans:
    """Sequence view over a dataset's frames, rendered on access."""

    def __init__(self, dataset: "SynthDataset"):
        self._ds = dataset

    def __len__(self) -> int:
        return self._ds.frame_count

    def __getitem__(self, i: int) -> ScanImage:
        return self._ds.scan(i)


class SynthDataset:
    """Rendered pattern-stack scans plus analytic ground truth.

    Frames are rendered lazily so only one raster is alive at a time. Noise
    is injected at the dataset level: each scanned frame is displaced by a
    seeded Gaussian registration jitter (``noise_sigma_px``, scanner pixels,
    modelling per-pass carriage error) and optionally perturbed by additive
    value noise expressed as a fraction of the white level.
    """

    def __init__(
        self,
        sim: Simulator,
        noise_sigma_px: float = 0.0,
        value_noise_frac: float = 0.0,
        noise_seed: int | None = None,
    ):
        self.sim = sim
        self.bench = sim.bench
        self.stack: PatternStack = generate_patterns(sim.bench.projector.width, sim.bench.projector.height)
        self.noise_sigma_px = float(noise_sigma_px)
        self.value_noise_frac = float(value_noise_frac)
        self.noise_seed = int(sim.bench.rng_seed if noise_seed is None else noise_seed)
        self.scans = _LazyScans(self)
        self._white_level = None

    @property
    def frame_count(self) -> int:
        return self.stack.frame_count

    def ground_truth(self) -> GroundTruth:
        return self.sim.ground_truth()

    def _noise_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence((self.noise_seed & 0xFFFFFFFF, 202, index))
        )

    def scan(self, index: int) -> ScanImage:
        img = self.sim.render(self.stack.frames[index]).data
        if self.noise_sigma_px > 0.0 or self.value_noise_frac > 0.0:
            rng = self._noise_rng(index)
            if self.noise_sigma_px > 0.0:
                dy, dx = rng.normal(0.0, self.noise_sigma_px, size=2)
                img = ndimage.shift(img, (dy, dx), order=1, mode="constant", cval=0.0)
            if self.value_noise_frac > 0.0:
                if self._white_level is None:
                    self._white_level = float(self.sim.render(self.stack.frames[self.stack.white_index]).data.max())
                sigma = self.value_noise_frac * self._white_level
                img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
            img = np.maximum(img, 0.0).astype(np.float32)
        return ScanImage(img)

    def white_scan(self) -> ScanImage:
        return self.scan(self.stack.white_index)


def synth_dataset(
    bench: BenchConfig,
    noise_sigma_px: float = 0.0,
    value_noise_frac: float = 0.0,
    samples_per_pixel: int | None = None,
) -> SynthDataset:
    """Build the full synthetic dataset for a bench configuration."""
    sim = Simulator(bench, samples_per_pixel=samples_per_pixel)
    return SynthDataset(sim, noise_sigma_px=noise_sigma_px, value_noise_frac=value_noise_frac)
