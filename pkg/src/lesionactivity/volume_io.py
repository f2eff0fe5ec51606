"""Volume file I/O: the raw `.lvol` format and a minimal NIfTI-1 codec.

`.lvol` is a JSON sidecar (shape, spacing, origin, kind, dtype, byte order)
next to a `<name>.bin` file holding the voxels in x-fastest order,
little-endian. Round trips are bit-exact.

The NIfTI-1 codec supports `.nii` / `.nii.gz` with float32 or uint8 data,
little-endian, axis-aligned orientation only. Spacing comes from pixdim,
the origin from the sform/qform translation. Spacing and origin are stored
at float32 precision (the header's native width). Anything outside this
subset raises :class:`VolumeFormatError` naming the offending field.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .volumes import Volume

_LVOL_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("<u1")}
_NIFTI_DTYPE_CODES = {16: np.dtype("<f4"), 2: np.dtype("<u1")}  # FLOAT32, UINT8
_HEADER_SIZE = 348
_VOX_OFFSET = 352.0


class VolumeFormatError(ValueError):
    """A volume file violates the supported format subset."""


def read_volume(path, kind: str | None = None) -> Volume:
    """Read a volume, dispatching on the file extension.

    `kind` overrides the inferred volume kind (`.lvol` stores it; NIfTI
    infers intensity for float32 and label for uint8 data).
    """
    path = Path(path)
    if path.name.endswith(".lvol"):
        return _read_lvol(path, kind)
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path, kind)
    raise VolumeFormatError(f"unsupported file extension: {path.name!r} (expected .lvol, .nii, .nii.gz)")


def write_volume(v: Volume, path) -> Path:
    """Write a volume, dispatching on the file extension. Returns the path."""
    path = Path(path)
    if path.name.endswith(".lvol"):
        return _write_lvol(v, path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _write_nifti(v, path)
    raise VolumeFormatError(f"unsupported file extension: {path.name!r} (expected .lvol, .nii, .nii.gz)")


# ---------------------------------------------------------------------------
# raw .lvol format


def _write_lvol(v: Volume, path: Path) -> Path:
    dtype = "u8" if v.kind == "label" else "f32"
    sidecar = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "kind": v.kind,
        "dtype": dtype,
        "byte_order": "little",
    }
    path.write_text(json.dumps(sidecar, indent=1) + "\n")
    payload = np.ascontiguousarray(v.data.ravel(order="F")).astype(_LVOL_DTYPES[dtype], copy=False)
    path.with_suffix(".bin").write_bytes(payload.tobytes())
    return path


def _read_lvol(path: Path, kind: str | None) -> Volume:
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"unreadable .lvol sidecar {path.name}: {e}") from e
    for field in ("shape", "spacing", "origin", "kind", "dtype", "byte_order"):
        if field not in meta:
            raise VolumeFormatError(f"missing field {field!r} in {path.name}")
    if meta["byte_order"] != "little":
        raise VolumeFormatError(f"unsupported byte_order {meta['byte_order']!r} in {path.name}")
    if meta["dtype"] not in _LVOL_DTYPES:
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r} in {path.name}")
    shape = tuple(int(n) for n in meta["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"invalid shape {meta['shape']} in {path.name}")
    dtype = _LVOL_DTYPES[meta["dtype"]]
    raw = path.with_suffix(".bin").read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"data size mismatch for {path.name}: shape {shape} needs {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")
    return Volume(data, meta["spacing"], meta["origin"], kind or meta["kind"])


# ---------------------------------------------------------------------------
# NIfTI-1


def _write_nifti(v: Volume, path: Path) -> Path:
    dtype_code = 2 if v.kind == "label" else 16
    dtype = _NIFTI_DTYPE_CODES[dtype_code]
    sx, sy, sz = (np.float32(s) for s in v.spacing)
    ox, oy, oz = (np.float32(o) for o in v.origin)

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)                       # sizeof_hdr
    struct.pack_into("<8h", header, 40, 3, *v.shape, 1, 1, 1, 1)          # dim
    struct.pack_into("<h", header, 70, dtype_code)                        # datatype
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)                # bitpix
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)      # pixdim (qfac=1)
    struct.pack_into("<f", header, 108, _VOX_OFFSET)                      # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                              # scl_slope
    struct.pack_into("<f", header, 116, 0.0)                              # scl_inter
    struct.pack_into("<B", header, 123, 2)                                # xyzt_units: mm
    struct.pack_into("<h", header, 252, 1)                                # qform_code
    struct.pack_into("<h", header, 254, 1)                                # sform_code
    struct.pack_into("<3f", header, 256, 0.0, 0.0, 0.0)                   # quatern b, c, d
    struct.pack_into("<3f", header, 268, ox, oy, oz)                      # qoffset
    struct.pack_into("<4f", header, 280, sx, 0, 0, ox)                    # srow_x
    struct.pack_into("<4f", header, 296, 0, sy, 0, oy)                    # srow_y
    struct.pack_into("<4f", header, 312, 0, 0, sz, oz)                    # srow_z
    header[344:348] = b"n+1\x00"                                          # magic

    payload = np.ascontiguousarray(v.data.ravel(order="F")).astype(dtype, copy=False)
    blob = bytes(header) + b"\x00" * 4 + payload.tobytes()
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(blob)
    return path


def _unpack(fmt, buf, offset):
    vals = struct.unpack_from(fmt, buf, offset)
    return vals[0] if len(vals) == 1 else vals


def _read_nifti(path: Path, kind: str | None) -> Volume:
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            blob = f.read()
    except (OSError, gzip.BadGzipFile) as e:
        raise VolumeFormatError(f"unreadable NIfTI file {path.name}: {e}") from e
    if len(blob) < _HEADER_SIZE:
        raise VolumeFormatError(
            f"truncated header in {path.name}: expected {_HEADER_SIZE} bytes, got {len(blob)}"
        )

    sizeof_hdr = _unpack("<i", blob, 0)
    if sizeof_hdr != _HEADER_SIZE:
        hint = " (big-endian files are not supported)" if struct.unpack_from(">i", blob, 0)[0] == _HEADER_SIZE else ""
        raise VolumeFormatError(f"bad sizeof_hdr {sizeof_hdr} in {path.name}{hint}")
    magic = blob[344:348]
    if magic not in (b"n+1\x00",):
        raise VolumeFormatError(f"unsupported magic {magic!r} in {path.name} (need single-file 'n+1')")

    dim = _unpack("<8h", blob, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise VolumeFormatError(f"unsupported dim[0]={ndim} in {path.name} (need a 3D volume)")
    if any(d > 1 for d in dim[4 : 1 + ndim]):
        raise VolumeFormatError(
            f"unsupported dim {list(dim[1 : 1 + ndim])} in {path.name} (trailing dimensions must be 1)"
        )
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise VolumeFormatError(f"invalid dim {shape} in {path.name}")

    datatype = _unpack("<h", blob, 70)
    if datatype not in _NIFTI_DTYPE_CODES:
        raise VolumeFormatError(f"unsupported datatype code {datatype} in {path.name} (need 2=uint8 or 16=float32)")
    dtype = _NIFTI_DTYPE_CODES[datatype]

    pixdim = _unpack("<8f", blob, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise VolumeFormatError(f"non-positive pixdim {spacing} in {path.name}")

    scl_slope = _unpack("<f", blob, 112)
    scl_inter = _unpack("<f", blob, 116)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise VolumeFormatError(
            f"intensity rescaling not supported: scl_slope={scl_slope}, scl_inter={scl_inter} in {path.name}"
        )

    origin = _read_origin(blob, spacing, path)

    vox_offset = int(_unpack("<f", blob, 108))
    if vox_offset < _HEADER_SIZE:
        raise VolumeFormatError(f"invalid vox_offset {vox_offset} in {path.name}")
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[vox_offset : vox_offset + expected]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"truncated data in {path.name}: dim {shape} needs {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    if kind is None:
        kind = "label" if datatype == 2 else "intensity"
    return Volume(data, spacing, origin, kind)


def _read_origin(blob: bytes, spacing, path: Path) -> tuple[float, float, float]:
    """Origin from sform (preferred) or qform; axis-aligned orientations only."""
    sform_code = _unpack("<h", blob, 254)
    qform_code = _unpack("<h", blob, 252)
    if sform_code > 0:
        rows = [np.array(_unpack("<4f", blob, off), dtype=np.float64) for off in (280, 296, 312)]
        rot = np.array([r[:3] for r in rows])
        diag = np.diag(rot).copy()
        off_diag = rot - np.diag(diag)
        tol = 1e-4 * max(spacing)
        if np.abs(off_diag).max() > tol or (diag <= 0).any():
            raise VolumeFormatError(f"sform of {path.name} is not axis-aligned with positive orientation")
        return tuple(float(r[3]) for r in rows)
    if qform_code > 0:
        b, c, d = _unpack("<3f", blob, 256)
        if abs(b) > 1e-6 or abs(c) > 1e-6 or abs(d) > 1e-6:
            raise VolumeFormatError(f"qform quaternion of {path.name} is not axis-aligned (b={b}, c={c}, d={d})")
        qfac = _unpack("<8f", blob, 76)[0]
        if qfac < 0:
            raise VolumeFormatError(f"negative qfac (z-flip) in {path.name} is not supported")
        return tuple(float(o) for o in _unpack("<3f", blob, 268))
    return (0.0, 0.0, 0.0)
