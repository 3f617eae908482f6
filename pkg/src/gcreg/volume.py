"""Volumes, continuous sampling and file I/O.

Arrays are indexed ``[x, y, z]``; on disk the x axis varies fastest, which is
the MetaImage convention and the one used for every raw payload we write.
All geometry is expressed in world millimetres.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, StructuralError, ValidationError

log = logging.getLogger(__name__)

_MET_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}
_MET_KEYS = {
    "ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset",
    "ElementType", "ElementDataFile",
}
# keys that change how the payload must be decoded; we refuse rather than ignore
_MET_FATAL = {
    "BinaryDataByteOrderMSB": "False",
    "ElementByteOrderMSB": "False",
    "CompressedData": "False",
}
_RAW_DTYPES = {"float32", "uint8", "int16", "int32"}


@dataclass(frozen=True)
class Geometry:
    """Voxel grid placement: ``world = origin + index * spacing``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("geometry needs exactly 3 dims, spacings and origin values")
        if any(d < 1 for d in dims):
            raise ValidationError(f"dims must be positive, got {dims}")
        if not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be strictly positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValidationError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def to_world(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * np.asarray(self.spacing)

    def to_voxel(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World box spanned by the first and last voxel centres."""
        lo = np.asarray(self.origin, dtype=np.float64)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def voxel_indices(self, flat=None) -> np.ndarray:
        """Integer ``(x, y, z)`` indices for flat x-fastest positions (all voxels by default)."""
        if flat is None:
            flat = np.arange(self.size)
        flat = np.asarray(flat)
        nx, ny, _ = self.dims
        return np.stack([flat % nx, (flat // nx) % ny, flat // (nx * ny)], axis=-1)

    def voxel_centers(self, flat=None) -> np.ndarray:
        return self.to_world(self.voxel_indices(flat))

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_json(cls, d: dict) -> "Geometry":
        try:
            return cls(d["dims"], d["spacing"], d.get("origin", (0.0, 0.0, 0.0)))
        except KeyError as e:
            raise ParseError(f"geometry is missing key {e.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class Volume3:
    """Immutable scalar volume; ``array`` is float32 and indexed ``[x, y, z]``."""

    geometry: Geometry
    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        arr = self._coerce(arr)
        if arr.ndim == 1:
            if arr.size != self.geometry.size:
                raise StructuralError(
                    f"data length {arr.size} does not match dims {self.geometry.dims}")
            arr = arr.reshape(self.geometry.dims, order="F")
        if arr.shape != self.geometry.dims:
            raise StructuralError(f"array shape {arr.shape} does not match dims {self.geometry.dims}")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    def _coerce(self, arr):
        arr = arr.astype(np.float32, copy=False)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains NaN or infinite values")
        return arr

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    @property
    def data(self) -> np.ndarray:
        """Flat x-fastest copy of the voxel values."""
        return self.array.ravel(order="F")


class MaskVolume(Volume3):
    """Label volume; keeps an integer array instead of float32."""

    def _coerce(self, arr):
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise ValidationError("mask volume holds non-integer labels")
            arr = arr.astype(np.int32)
        if np.any(arr < 0):
            raise ValidationError("mask labels must be non-negative")
        return arr

    def labels(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.array) if v != 0)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered world-space points; index ``i`` pairs with index ``i`` of another set."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# sampling

def _corners(geom: Geometry, points):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = geom.to_voxel(pts)
    hi = np.asarray(geom.dims) - 1
    inside = (c >= 0) & (c <= hi)
    c = np.clip(c, 0, hi)
    i0 = np.minimum(np.floor(c).astype(np.intp), np.maximum(hi - 1, 0))
    f = c - i0
    i1 = np.minimum(i0 + 1, hi)
    return i0, i1, f, inside


def _gather(arr, i0, i1):
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    a = arr
    return (a[x0, y0, z0], a[x1, y0, z0], a[x0, y1, z0], a[x1, y1, z0],
            a[x0, y0, z1], a[x1, y0, z1], a[x0, y1, z1], a[x1, y1, z1])


def sample_trilinear(v: Volume3, points) -> np.ndarray | float:
    """Trilinear interpolation at world points, clamping to the edge outside the grid."""
    scalar = np.ndim(points) == 1
    i0, i1, f, _ = _corners(v.geometry, points)
    c000, c100, c010, c110, c001, c101, c011, c111 = (
        c.astype(np.float64) for c in _gather(v.array, i0, i1))
    fx, fy, fz = f.T
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out = c0 + fz * (c1 - c0)
    return float(out[0]) if scalar else out


def sample_with_gradient(v: Volume3, points):
    """Values and world-space gradients (intensity per mm) of the trilinear interpolant.

    The gradient is the exact derivative of the clamped interpolant, so it is
    zero along any axis where the point lies outside the grid.
    """
    i0, i1, f, inside = _corners(v.geometry, points)
    c000, c100, c010, c110, c001, c101, c011, c111 = (
        c.astype(np.float64) for c in _gather(v.array, i0, i1))
    fx, fy, fz = f.T
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    dx100, dx110, dx101, dx111 = c100 - c000, c110 - c010, c101 - c001, c111 - c011
    c00 = c000 + fx * dx100
    c10 = c010 + fx * dx110
    c01 = c001 + fx * dx101
    c11 = c011 + fx * dx111
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    val = c0 + fz * (c1 - c0)

    d_x = gz * (gy * dx100 + fy * dx110) + fz * (gy * dx101 + fy * dx111)
    d_y = gz * (c10 - c00) + fz * (c11 - c01)
    d_z = c1 - c0
    grad = np.stack([d_x, d_y, d_z], axis=-1)
    # collapsed axes (dims == 1) and clamped coordinates carry no slope
    grad = np.where(inside & (np.asarray(v.dims) > 1), grad, 0.0)
    grad /= np.asarray(v.spacing)
    return val, grad


def sample_gradient(v: Volume3, points) -> np.ndarray:
    scalar = np.ndim(points) == 1
    _, g = sample_with_gradient(v, points)
    return g[0] if scalar else g


def sample_nearest(v: Volume3, points) -> np.ndarray:
    """Nearest-voxel lookup (clamped); keeps the volume's dtype, used for labels."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = v.geometry.to_voxel(pts)
    idx = np.clip(np.floor(c + 0.5).astype(np.intp), 0, np.asarray(v.dims) - 1)
    return v.array[idx[:, 0], idx[:, 1], idx[:, 2]]


# ---------------------------------------------------------------------------
# MetaImage (read-only subset)

def _parse_mhd_header(lines):
    header = {}
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"malformed MetaImage header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    return header


def _floats(header, key, n, default=None):
    if key not in header:
        if default is None:
            raise ParseError(f"MetaImage header is missing {key}")
        return default
    try:
        vals = [float(t) for t in header[key].split()]
    except ValueError:
        raise ParseError(f"MetaImage key {key} is not numeric: {header[key]!r}") from None
    if len(vals) != n:
        raise ParseError(f"MetaImage key {key} needs {n} values, got {len(vals)}")
    return vals


def _read_metaimage(path: Path, mask: bool):
    blob = path.read_bytes()
    # header lines are ASCII; for .mha the payload follows ElementDataFile = LOCAL
    marker = blob.find(b"ElementDataFile")
    if marker < 0:
        raise ParseError("MetaImage header is missing ElementDataFile")
    eol = blob.find(b"\n", marker)
    eol = len(blob) if eol < 0 else eol + 1
    try:
        text = blob[:eol].decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("MetaImage header is not ASCII") from None
    header = _parse_mhd_header(text.splitlines())

    for key in header:
        if key not in _MET_KEYS and key not in _MET_FATAL:
            log.warning("ignoring unsupported MetaImage key %s", key)
    for key, ok in _MET_FATAL.items():
        if key in header and header[key].lower() != ok.lower():
            raise ParseError(f"MetaImage key {key} = {header[key]} is not supported")

    if "NDims" not in header:
        raise ParseError("MetaImage header is missing NDims")
    if header["NDims"].strip() != "3":
        raise ParseError(f"MetaImage key NDims must be 3, got {header['NDims']}")
    dims = _floats(header, "DimSize", 3)
    if any(d != int(d) or d < 1 for d in dims):
        raise ParseError(f"MetaImage key DimSize is invalid: {header['DimSize']!r}")
    spacing = _floats(header, "ElementSpacing", 3, default=[1.0, 1.0, 1.0])
    origin = _floats(header, "Offset", 3, default=[0.0, 0.0, 0.0])
    etype = header.get("ElementType")
    if etype not in _MET_TYPES:
        raise ParseError(f"MetaImage key ElementType has unsupported value {etype!r}")
    dtype = _MET_TYPES[etype]

    datafile = header["ElementDataFile"]
    if datafile == "LOCAL":
        payload = blob[eol:]
    else:
        payload = (path.parent / datafile).read_bytes()
    geom = Geometry(tuple(int(d) for d in dims), spacing, origin)
    expected = geom.size * dtype.itemsize
    if len(payload) != expected:
        raise StructuralError(
            f"MetaImage payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype)
    return (MaskVolume if mask else Volume3)(geom, arr)


# ---------------------------------------------------------------------------
# raw + JSON sidecar

def _sidecar_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".json":
        return p, p.with_suffix(".raw")
    return p.with_suffix(".json"), p if p.suffix == ".raw" else p.with_suffix(".raw")


def _write_raw(path, values: np.ndarray, geom: Geometry, components: int, order, dtype):
    return _write_raw_chunks(path, [values], geom, components, order, dtype)


def _write_raw_chunks(path, chunks, geom: Geometry, components: int, order, dtype):
    meta_path, raw_path = _sidecar_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    dt = np.dtype(dtype).newbyteorder("<")
    written = 0
    with open(raw_path, "wb") as fh:
        for chunk in chunks:
            payload = np.ascontiguousarray(chunk, dtype=dt)
            payload.tofile(fh)
            written += payload.size
    if written != geom.size * components:
        raise StructuralError(f"wrote {written} values, dims {geom.dims} x {components} need {geom.size * components}")
    meta = geom.to_json() | {
        "components": components,
        "component_order": list(order),
        "dtype": np.dtype(dtype).name,
        "byte_order": "little",
        "layout": "x-fastest",
        "data_file": raw_path.name,
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


def _read_raw(path, components: int):
    meta_path, raw_path = _sidecar_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{meta_path}: invalid JSON ({e.msg})") from None
    geom = Geometry.from_json(meta)
    if int(meta.get("components", 1)) != components:
        raise StructuralError(
            f"{meta_path}: expected {components} component(s), sidecar says {meta.get('components')}")
    dtype_name = meta.get("dtype", "float32")
    if dtype_name not in _RAW_DTYPES:
        raise ParseError(f"{meta_path}: unsupported dtype {dtype_name!r}")
    if meta.get("byte_order", "little") != "little":
        raise ParseError(f"{meta_path}: only little-endian payloads are supported")
    raw_path = meta_path.parent / meta.get("data_file", raw_path.name)
    dtype = np.dtype(dtype_name).newbyteorder("<")
    payload = raw_path.read_bytes()
    expected = geom.size * components * dtype.itemsize
    if len(payload) != expected:
        raise StructuralError(
            f"{raw_path}: payload has {len(payload)} bytes, sidecar dims imply {expected}")
    return np.frombuffer(payload, dtype=dtype), geom


def load_volume(path, format: str | None = None, mask: bool = False) -> Volume3:
    """Load a volume from MetaImage (.mhd/.mha) or raw+json; intensities are not rescaled."""
    path = Path(path)
    if format is None:
        format = "metaimage" if path.suffix.lower() in (".mhd", ".mha") else "raw+json"
    if format == "metaimage":
        return _read_metaimage(path, mask)
    if format == "raw+json":
        values, geom = _read_raw(path, 1)
        return (MaskVolume if mask else Volume3)(geom, values)
    raise ValidationError(f"unknown volume format {format!r}")


def load_mask(path, format: str | None = None) -> MaskVolume:
    return load_volume(path, format, mask=True)


def save_volume(v: Volume3, path) -> Path:
    """Write ``v`` as raw+json; returns the sidecar path."""
    dtype = v.array.dtype if isinstance(v, MaskVolume) else np.float32
    if np.dtype(dtype).name not in _RAW_DTYPES:
        dtype = np.int32
    return _write_raw(path, v.data, v.geometry, 1, ["value"], dtype)


def write_dvf(field, geometry: Geometry, path) -> Path:
    """Write a displacement field: float32, 3 contiguous components per voxel, x fastest.

    ``field`` is either ``(nx, ny, nz, 3)`` or flat ``(nx*ny*nz, 3)`` in x-fastest order.
    """
    field = np.asarray(field)
    if field.ndim == 4:
        field = field.transpose(2, 1, 0, 3).reshape(-1, 3)
    if field.shape != (geometry.size, 3):
        raise StructuralError(f"field shape {field.shape} does not match dims {geometry.dims}")
    return _write_raw(path, field, geometry, 3, ["x", "y", "z"], np.float32)


def write_dvf_chunks(chunks, geometry: Geometry, path) -> Path:
    """Stream a displacement field to disk from consecutive flat ``(m, 3)`` chunks (x-fastest order)."""
    return _write_raw_chunks(path, chunks, geometry, 3, ["x", "y", "z"], np.float32)


def read_dvf(path) -> tuple[np.ndarray, Geometry]:
    """Inverse of :func:`write_dvf`; returns a flat ``(N, 3)`` float32 field and its geometry."""
    values, geom = _read_raw(path, 3)
    return values.reshape(-1, 3).astype(np.float32), geom


# ---------------------------------------------------------------------------
# landmarks

def load_landmarks(path, units: str = "mm", geometry: Geometry | None = None) -> LandmarkSet:
    """Read 3-column landmarks (comma or whitespace separated, optional header row).

    With ``units="voxel"`` the rows are voxel indices and are mapped through ``geometry``.
    """
    if units not in ("mm", "voxel"):
        raise ValidationError(f"landmark units must be 'mm' or 'voxel', got {units!r}")
    if units == "voxel" and geometry is None:
        raise ValidationError("voxel-unit landmarks need the image geometry")
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = next(csv.reader([text])) if "," in text else text.split()
            fields = [f.strip() for f in fields if f.strip()]
            try:
                vals = [float(f) for f in fields]
            except ValueError:
                if not rows and lineno == 1:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: non-numeric landmark row {text!r}") from None
            if len(vals) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 values, got {len(vals)}")
            rows.append(vals)
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if units == "voxel":
        pts = geometry.to_world(pts)
    return LandmarkSet(pts)


def save_landmarks(lm: LandmarkSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_mm", "y_mm", "z_mm"])
        for p in lm.points:
            w.writerow([repr(float(c)) for c in p])
