"""Gray-code pattern stacks and scanner-side decoding.

A pattern stack contains, for every bit of the column code and then the row
code, a positive frame followed by its complement, and finally one all-white
and one all-black reference frame. Bits are ordered MSB first. Decoding
classifies each bit by comparing the positive and complement scans, which is
robust to the large per-blob brightness variation of a tilted scanner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCodeError, StackMismatchError

REASON_OK = 0
REASON_LOW_CONTRAST = 1
REASON_INCONSISTENT_BIT = 2

REASON_NAMES = {
    REASON_OK: "ok",
    REASON_LOW_CONTRAST: "low-contrast",
    REASON_INCONSISTENT_BIT: "inconsistent-bit",
}

DEFAULT_CONTRAST_THRESHOLD = 0.10
DEFAULT_BIT_THRESHOLD = 0.05


def gray_encode(n):
    """Reflected binary code of ``n`` (int or integer array)."""
    n = np.asarray(n)
    if np.any(n < 0):
        raise ValueError("gray_encode requires non-negative integers")
    out = n ^ (n >> 1)
    return int(out) if out.ndim == 0 else out


def gray_decode(g):
    """Inverse of :func:`gray_encode` for ints or integer arrays."""
    arr = np.asarray(g)
    if np.any(arr < 0):
        raise ValueError("gray_decode requires non-negative integers")
    n = arr.astype(np.int64)
    shift = 1
    while shift < 64 and (n >> shift).any():
        n = n ^ (n >> shift)
        shift *= 2
    if arr.ndim == 0:
        return int(n)
    return n.astype(arr.dtype) if arr.dtype.kind in "iu" else n


def _bits_for(extent: int) -> int:
    return int(math.ceil(math.log2(extent))) if extent > 1 else 0


@dataclass(frozen=True)
class PatternStack:
    """Ordered binary frames for one projector resolution."""

    width: int
    height: int
    frames: tuple  # of (height, width) bool arrays

    @property
    def col_bits(self) -> int:
        return _bits_for(self.width)

    @property
    def row_bits(self) -> int:
        return _bits_for(self.height)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def white_index(self) -> int:
        return self.frame_count - 2

    @property
    def black_index(self) -> int:
        return self.frame_count - 1


def generate_patterns(width: int, height: int) -> PatternStack:
    """Build the full stack: column bits, row bits, then white and black.

    Each bit contributes a positive frame immediately followed by its
    complement, MSB first.
    """
    if width < 1 or height < 1:
        raise ValueError("pattern dimensions must be >= 1")
    frames: list[np.ndarray] = []
    col_bits = _bits_for(width)
    row_bits = _bits_for(height)
    col_codes = gray_encode(np.arange(width))
    row_codes = gray_encode(np.arange(height))
    for b in range(col_bits):
        stripe = ((col_codes >> (col_bits - 1 - b)) & 1).astype(bool)
        frame = np.broadcast_to(stripe, (height, width)).copy()
        frames.append(frame)
        frames.append(~frame)
    for b in range(row_bits):
        stripe = ((row_codes >> (row_bits - 1 - b)) & 1).astype(bool)
        frame = np.broadcast_to(stripe[:, None], (height, width)).copy()
        frames.append(frame)
        frames.append(~frame)
    frames.append(np.ones((height, width), dtype=bool))
    frames.append(np.zeros((height, width), dtype=bool))
    return PatternStack(width=width, height=height, frames=tuple(frames))


@dataclass
class DecodedMap:
    """Per-scanner-pixel decoded projector coordinates.

    ``u``/``v`` are int32 rasters with -1 at invalid pixels; ``reason`` holds
    one of the REASON_* codes. ``proj_width``/``proj_height`` give the decoded
    coordinate range.
    """

    u: np.ndarray
    v: np.ndarray
    reason: np.ndarray
    proj_width: int
    proj_height: int
    _index: object = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def valid(self) -> np.ndarray:
        return self.reason == REASON_OK

    def code_index(self, weight_image=None) -> "_CodeIndex":
        if weight_image is not None:
            key = id(weight_image)
            cached = self._index if isinstance(self._index, dict) else None
            if cached is None or cached.get("key") != key:
                object.__setattr__(
                    self, "_index", {"key": key, "index": _CodeIndex(self, weight_image)}
                )
            return self._index["index"]
        if self._index is None or isinstance(self._index, dict):
            plain = _CodeIndex(self)
            if isinstance(self._index, dict):
                return plain
            object.__setattr__(self, "_index", plain)
        return self._index


class _CodeIndex:
    """Sorted index from decoded code to scanner-pixel centroids.

    With a weight image (typically the white scan) the centroids are
    irradiance weighted, which estimates each code's true beam-footprint
    centre at sub-pixel precision instead of the raster-quantized cell
    centre.
    """

    def __init__(self, dmap: DecodedMap, weight_image=None):
        ys, xs = np.nonzero(dmap.valid)
        codes = dmap.u[ys, xs].astype(np.int64) * (dmap.proj_height + 1) + dmap.v[ys, xs]
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        if weight_image is not None:
            w = np.asarray(weight_image, dtype=float)[ys, xs][order]
            w = np.maximum(w, 0.0) + 1e-12
        else:
            w = np.ones(len(codes))
        xs = xs[order].astype(float) * w
        ys = ys[order].astype(float) * w
        uniq, starts, counts = np.unique(codes, return_index=True, return_counts=True)
        if len(uniq):
            sums_w = np.add.reduceat(w, starts)
            sums_x = np.add.reduceat(xs, starts)
            sums_y = np.add.reduceat(ys, starts)
            centroids = np.column_stack([sums_x / sums_w, sums_y / sums_w])
        else:
            centroids = np.empty((0, 2))
        self._mod = dmap.proj_height + 1
        self._codes = uniq
        self._counts = counts
        self._centroids = centroids

    def lookup(self, u: int, v: int):
        """Centroid and pixel count for one exact code, or None."""
        key = int(u) * self._mod + int(v)
        i = np.searchsorted(self._codes, key)
        if i < len(self._codes) and self._codes[i] == key:
            return self._centroids[i], int(self._counts[i])
        return None


def _scan_data(scan) -> np.ndarray:
    data = getattr(scan, "data", scan)
    return np.asarray(data, dtype=np.float64)


def decode_stack(
    scans,
    stack: PatternStack,
    contrast_threshold: float = DEFAULT_CONTRAST_THRESHOLD,
    bit_threshold: float = DEFAULT_BIT_THRESHOLD,
) -> DecodedMap:
    """Decode aligned scans of a pattern stack into a :class:`DecodedMap`.

    A pixel is valid iff its white-minus-black contrast exceeds
    ``contrast_threshold`` of the stack's dynamic range (the brightest
    white-minus-black contrast anywhere) and every bit is decisive:
    ``|positive - complement| > bit_threshold * (white - black)`` at that
    pixel. The per-pixel bit reference keeps decoding robust to the large
    brightness variation across a tilted scanner.
    """
    if len(scans) != stack.frame_count:
        raise StackMismatchError(
            f"expected {stack.frame_count} scans for this stack, got {len(scans)}"
        )
    white = _scan_data(scans[stack.white_index])
    black = _scan_data(scans[stack.black_index])
    if white.shape != black.shape:
        raise StackMismatchError("scans do not share one raster")
    contrast = white - black
    dyn = float(contrast.max(initial=0.0))
    reason = np.full(white.shape, REASON_OK, dtype=np.uint8)
    if dyn <= 0.0:
        reason[:] = REASON_LOW_CONTRAST
        u = np.full(white.shape, -1, dtype=np.int32)
        return DecodedMap(u, u.copy(), reason, stack.width, stack.height)
    reason[contrast <= contrast_threshold * dyn] = REASON_LOW_CONTRAST
    bit_floor = bit_threshold * np.maximum(contrast, 0.0)

    def decode_axis(first_frame: int, nbits: int, extent: int) -> np.ndarray:
        code = np.zeros(white.shape, dtype=np.int32)
        for b in range(nbits):
            pos = _scan_data(scans[first_frame + 2 * b])
            comp = _scan_data(scans[first_frame + 2 * b + 1])
            if pos.shape != white.shape or comp.shape != white.shape:
                raise StackMismatchError("scans do not share one raster")
            diff = pos - comp
            undecided = (np.abs(diff) <= bit_floor) & (reason == REASON_OK)
            reason[undecided] = REASON_INCONSISTENT_BIT
            code = (code << 1) | (diff > 0).astype(np.int32)
        decoded = gray_decode(code)
        out_of_range = (decoded >= extent) & (reason == REASON_OK)
        reason[out_of_range] = REASON_INCONSISTENT_BIT
        return decoded

    u = decode_axis(0, stack.col_bits, stack.width)
    v = decode_axis(2 * stack.col_bits, stack.row_bits, stack.height)
    invalid = reason != REASON_OK
    u[invalid] = -1
    v[invalid] = -1
    return DecodedMap(u, v, reason, stack.width, stack.height)


def inverse_lookup(
    dmap: DecodedMap,
    target,
    window_px: float = 6.0,
    spread_limit_px: float = 12.0,
    min_cells: int = 3,
    weight_image=None,
) -> np.ndarray:
    """Sub-pixel scanner position of a (possibly fractional) projector pixel.

    Gathers the centroids of decoded-code cells within ``window_px`` of the
    integer-rounded target and evaluates a count-weighted local affine fit of
    code -> raster at the fractional target. Special cases: a single isolated
    exact cell returns its own centroid; an absent exact code surrounded by
    its four neighbours reduces to the bilinear point among their centroids.
    Raises :class:`MissingCodeError` when no code cell lies near the target.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (2,):
        raise ValueError("target must be a 2-vector (u, v)")
    u0, v0 = int(round(target[0])), int(round(target[1]))
    index = dmap.code_index(weight_image)
    r = int(math.ceil(window_px))
    cells = []  # (du, dv, centroid, count)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            if du * du + dv * dv > window_px * window_px:
                continue
            uu, vv = u0 + du, v0 + dv
            if uu < 0 or vv < 0 or uu >= dmap.proj_width or vv >= dmap.proj_height:
                continue
            hit = index.lookup(uu, vv)
            if hit is not None:
                cells.append((du, dv, hit[0], hit[1]))
    if not cells:
        raise MissingCodeError(f"no decoded pixels near projector code ({u0}, {v0})")
    # anchor on the cell closest to the target code; discard cells whose
    # centroids are further than the blob scale (codes repeated across blobs)
    cells.sort(key=lambda c: (c[0] ** 2 + c[1] ** 2, c[0], c[1]))
    anchor = cells[0][2]
    kept = [c for c in cells if np.hypot(*(c[2] - anchor)) <= spread_limit_px]
    offsets = np.array([(c[0], c[1]) for c in kept], dtype=float)
    cents = np.array([c[2] for c in kept], dtype=float)
    counts = np.array([c[3] for c in kept], dtype=float)
    if len(kept) == 1:
        return cents[0]
    frac = np.array([target[0] - u0, target[1] - v0])
    A = np.column_stack([offsets, np.ones(len(kept))])
    w = np.sqrt(counts)
    if len(kept) >= min_cells and np.linalg.matrix_rank(A) == 3:
        sol, *_ = np.linalg.lstsq(A * w[:, None], cents * w[:, None], rcond=None)
        return np.array([frac[0], frac[1], 1.0]) @ sol
    return (cents * counts[:, None]).sum(axis=0) / counts.sum()


def forward_lookup(dmap: DecodedMap, point_xy, radius_px: float = 2.5) -> np.ndarray:
    """Decoded projector coordinate at a sub-pixel scanner position.

    Fits a local affine map raster -> code over the valid pixels within
    ``radius_px`` and evaluates it at ``point_xy``. Degenerate neighbourhoods
    fall back to the weighted mean code (bilinear when exactly the four
    surrounding pixels are valid). Raises :class:`MissingCodeError` when the
    neighbourhood holds no valid pixel.
    """
    p = np.asarray(point_xy, dtype=float)
    if p.shape != (2,):
        raise ValueError("point must be a 2-vector (x, y)")
    h, w = dmap.shape
    r = int(math.ceil(radius_px))
    x0, y0 = int(round(p[0])), int(round(p[1]))
    xs = np.arange(max(0, x0 - r), min(w, x0 + r + 1))
    ys = np.arange(max(0, y0 - r), min(h, y0 + r + 1))
    if len(xs) == 0 or len(ys) == 0:
        raise MissingCodeError(f"scanner point ({p[0]:.2f}, {p[1]:.2f}) is outside the raster")
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    dist2 = (gx - p[0]) ** 2 + (gy - p[1]) ** 2
    keep = (dist2 <= radius_px * radius_px) & dmap.valid[gy, gx]
    if not keep.any():
        raise MissingCodeError(
            f"no decoded pixels within {radius_px:g} px of scanner point ({p[0]:.2f}, {p[1]:.2f})"
        )
    gx, gy = gx[keep], gy[keep]
    codes = np.column_stack([dmap.u[gy, gx], dmap.v[gy, gx]]).astype(float)
    A = np.column_stack([gx.astype(float), gy.astype(float), np.ones(len(gx))])
    if len(gx) >= 3 and np.linalg.matrix_rank(A) == 3:
        sol, *_ = np.linalg.lstsq(A, codes, rcond=None)
        return np.array([p[0], p[1], 1.0]) @ sol
    weights = 1.0 / (1.0 + dist2[keep])
    return (codes * weights[:, None]).sum(axis=0) / weights.sum()
