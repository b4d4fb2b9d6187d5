"""On-disk artifact formats.

Binary P5 PGM for pattern frames (8 bit) and scans (16 bit, big endian per
the netpbm convention); a compact sidecar for decoded maps; CSV tables for
ground truth, blobs, chief-ray samples, error curves and evaluation results;
calibration reports as JSON. All writers are deterministic: fixed key order,
shortest-roundtrip float formatting, and no timestamps.

Within CSV tables a pinhole is identified by ``pinhole_id = row * 1000 + col``
together with its ``mask_id`` column.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .calibrate import CalibrationResult
from .chief import ChiefRaySample, PinholeRef
from .graycode import DecodedMap

DMAP_MAGIC = b"DMAP1"
_DMAP_DTYPE = np.dtype([("u", "<i4"), ("v", "<i4"), ("reason", "u1")])

PINHOLE_ID_BASE = 1000


def pinhole_id(row: int, col: int) -> int:
    return int(row) * PINHOLE_ID_BASE + int(col)


def split_pinhole_id(pid: int) -> tuple[int, int]:
    return int(pid) // PINHOLE_ID_BASE, int(pid) % PINHOLE_ID_BASE


# ----------------------------------------------------------------------------
# PGM


def write_pgm(path, array: np.ndarray) -> None:
    """Write a binary P5 PGM; dtype picks 8- or 16-bit depth."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("PGM requires a 2D array")
    if arr.dtype == np.uint8:
        maxval = 255
        payload = arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval = 65535
        payload = arr.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {arr.dtype}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + payload)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval == 255:
        arr = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    elif maxval == 65535:
        arr = np.frombuffer(data, dtype=">u2", count=width * height, offset=pos).astype(np.uint16)
    else:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return arr.reshape(height, width).copy()


def quantize_u16(data: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(np.asarray(data, dtype=float) * scale), 0, 65535).astype(np.uint16)


# ----------------------------------------------------------------------------
# decoded-map sidecar


def write_decoded_map(path, dmap: DecodedMap) -> None:
    h, w = dmap.shape
    header = DMAP_MAGIC + np.array([w, h], dtype="<u4").tobytes()
    records = np.empty(h * w, dtype=_DMAP_DTYPE)
    records["u"] = dmap.u.ravel()
    records["v"] = dmap.v.ravel()
    records["reason"] = dmap.reason.ravel()
    Path(path).write_bytes(header + records.tobytes())


def read_decoded_map(path, proj_width: int | None = None, proj_height: int | None = None) -> DecodedMap:
    data = Path(path).read_bytes()
    if not data.startswith(DMAP_MAGIC):
        raise ValueError(f"{path}: bad decoded-map magic")
    w, h = np.frombuffer(data, dtype="<u4", count=2, offset=len(DMAP_MAGIC))
    records = np.frombuffer(data, dtype=_DMAP_DTYPE, count=int(w) * int(h), offset=len(DMAP_MAGIC) + 8)
    u = records["u"].reshape(h, w).astype(np.int32)
    v = records["v"].reshape(h, w).astype(np.int32)
    reason = records["reason"].reshape(h, w).astype(np.uint8)
    if proj_width is None:
        proj_width = int(u.max()) + 1 if (u >= 0).any() else 1
    if proj_height is None:
        proj_height = int(v.max()) + 1 if (v >= 0).any() else 1
    return DecodedMap(u=u, v=v, reason=reason, proj_width=proj_width, proj_height=proj_height)


# ----------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    text = Path(path).read_text(encoding="ascii").strip("\n")
    lines = text.split("\n")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


GT_TABLE_HEADER = ["pinhole_id", "mask_id", "u_chief", "v_chief", "s_x_mm", "s_y_mm"]
BLOB_TABLE_HEADER = [
    "blob_id",
    "mask_id",
    "row",
    "col",
    "cx",
    "cy",
    "area",
    "ell_a",
    "ell_b",
    "ell_theta",
    "residual",
]
CHIEF_TABLE_HEADER = [
    "pinhole_id",
    "mask_id",
    "u_c",
    "v_c",
    "sx_mm",
    "sy_mm",
    "sz_mm",
    "residual",
    "status",
]


def write_chief_samples(path, samples) -> None:
    rows = []
    for s in samples:
        pid = pinhole_id(s.pinhole.row, s.pinhole.col) if s.pinhole else -1
        mid = s.pinhole.mask_id if s.pinhole else -1
        if s.status == "ok":
            rows.append(
                (
                    pid,
                    mid,
                    float(s.chief_px[0]),
                    float(s.chief_px[1]),
                    float(s.scanner_world[0]),
                    float(s.scanner_world[1]),
                    float(s.scanner_world[2]),
                    float(s.residual),
                    s.status,
                )
            )
        else:
            rows.append((pid, mid, -1.0, -1.0, 0.0, 0.0, 0.0, -1.0, s.status))
    write_csv(path, CHIEF_TABLE_HEADER, rows)


def read_chief_samples(path, pinhole_lookup=None) -> list[ChiefRaySample]:
    """Parse a chief-sample table; ``pinhole_lookup`` maps (mask_id, row, col)
    to (world, local_mm) tuples so the samples regain full pinhole identity."""
    header, rows = read_csv(path)
    if header != CHIEF_TABLE_HEADER:
        raise ValueError(f"{path}: unexpected chief table header {header}")
    samples = []
    for r in rows:
        pid, mid = int(r[0]), int(r[1])
        row_i, col_i = split_pinhole_id(pid)
        pin = None
        if pid >= 0 and mid >= 0:
            world, local = (0.0, 0.0, 0.0), (0.0, 0.0)
            if pinhole_lookup is not None:
                world, local = pinhole_lookup(mid, row_i, col_i)
            pin = PinholeRef(mask_id=mid, row=row_i, col=col_i, world=tuple(world), local_mm=tuple(local))
        samples.append(
            ChiefRaySample(
                pinhole=pin,
                chief_px=np.array([float(r[2]), float(r[3])]),
                scanner_raster=np.array([np.nan, np.nan]),
                scanner_world=np.array([float(r[4]), float(r[5]), float(r[6])]),
                residual=float(r[7]),
                status=r[8],
            )
        )
    return samples


# ----------------------------------------------------------------------------
# reports


def dump_report(result: CalibrationResult) -> str:
    return json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n"


def write_report(path, result: CalibrationResult) -> None:
    Path(path).write_text(dump_report(result), encoding="ascii")


def read_report(path) -> CalibrationResult:
    return CalibrationResult.from_json_dict(json.loads(Path(path).read_text(encoding="ascii")))


# ----------------------------------------------------------------------------
# plots


def write_error_curve_csv(path, curve) -> None:
    write_csv(path, ["n_excluded", "mrpe_scanner_px"], [(i, float(e)) for i, e in enumerate(curve)])


def write_error_curve_svg(path, curve, title: str = "scanner reprojection error vs excluded sets") -> None:
    """Minimal static polyline chart; no external plotting dependency."""
    width, height, margin = 640, 400, 56
    n = len(curve)
    xs = [margin + (width - 2 * margin) * (i / max(1, n - 1)) for i in range(n)]
    lo, hi = (min(curve), max(curve)) if n else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    ys = [height - margin - (height - 2 * margin) * ((e - lo) / (hi - lo)) for e in curve]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    marks = "".join(
        f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#c0392b"/>' for x, y in zip(xs, ys)
    )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="14">{title}</text>'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>'
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">excluded sets</text>'
        f'<text x="16" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 16 {height / 2:.0f})">error (scan px)</text>'
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10">0</text>'
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="10" text-anchor="end">{max(0, n - 1)}</text>'
        f'<text x="{margin - 4}" y="{height - margin}" font-size="10" text-anchor="end">{lo:.4g}</text>'
        f'<text x="{margin - 4}" y="{margin + 4}" font-size="10" text-anchor="end">{hi:.4g}</text>'
        f'<polyline points="{pts}" fill="none" stroke="#2c3e50" stroke-width="1.5"/>'
        f"{marks}</svg>"
    )
    Path(path).write_text(svg + "\n", encoding="ascii")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
