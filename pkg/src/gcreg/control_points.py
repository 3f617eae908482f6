"""Learnable Gaussian control points.

Each point carries a centre, a (log) scale, an optional shape rotation and a
local rigid transform (translation and/or rotation). Quaternions are stored
raw as ``(w, x, y, z)`` and normalised wherever a rotation matrix is needed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, StructuralError, ValidationError

SCALINGS = {"isotropic": 1, "diagonal": 3}
BLOCK_ORDER = ("positions", "log_scales", "rotations", "translations", "transform_rotations")


@dataclass(frozen=True)
class DofConfig:
    scaling: str = "isotropic"
    shape_rotation: bool = False
    transform_rotation: bool = False
    translation: bool = True

    def __post_init__(self):
        if self.scaling not in SCALINGS:
            raise ValidationError(f"scaling must be one of {sorted(SCALINGS)}, got {self.scaling!r}")
        if not (self.transform_rotation or self.translation):
            raise ValidationError("a DoF config needs a transform rotation, a translation or both")

    @property
    def scale_dof(self) -> int:
        return SCALINGS[self.scaling]

    @property
    def dof(self) -> int:
        """Per-point degrees of freedom excluding the 3 position coordinates."""
        return (self.scale_dof + 3 * self.shape_rotation
                + 3 * self.transform_rotation + 3 * self.translation)

    @classmethod
    def parse(cls, value) -> "DofConfig":
        if isinstance(value, DofConfig):
            return value
        if isinstance(value, str):
            try:
                return DOF_CONFIGS[value.upper()]
            except KeyError:
                raise ValidationError(f"unknown DoF config {value!r}; expected one of {list(DOF_CONFIGS)}") from None
        if isinstance(value, dict):
            return cls(**value)
        raise ValidationError(f"cannot interpret DoF config {value!r}")


# Rows I-VI of the DoF ablation, with the two transform columns read as
# (translation, rotation): see the decisions ledger.
DOF_CONFIGS = {
    "I": DofConfig("isotropic", False, False, True),
    "II": DofConfig("isotropic", False, True, True),
    "III": DofConfig("diagonal", False, False, True),
    "IV": DofConfig("diagonal", False, True, True),
    "V": DofConfig("diagonal", True, False, True),
    "VI": DofConfig("diagonal", True, True, True),
}


# ---------------------------------------------------------------------------
# quaternions

def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for a batch of (not necessarily unit) quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_matrix_jacobian(q) -> np.ndarray:
    """``dR/dq`` for raw quaternions, shape ``(..., 4, 3, 3)``, including the normalisation."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    zero = np.zeros_like(w)
    # derivative of the unit-quaternion formula w.r.t. each unit component
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], -1)
    dU = 2 * np.stack([dw, dx, dy, dz], axis=-2).reshape(q.shape[:-1] + (4, 3, 3))
    # chain through u = q / |q|: du/dq = (I - u u^T) / |q|
    proj = (np.eye(4) - u[..., :, None] * u[..., None, :]) / norm[..., None]
    return np.einsum("...pi,...pjk->...ijk", proj, dU)


def rotation_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValidationError("zero quaternion has no rotation")
    if abs(norm - 1.0) > 1e-6:
        raise ValidationError(f"quaternion must have unit norm, got |q| = {norm:.8g}")
    return quat_to_matrix(q)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    # a collapsed quaternion resets to identity instead of producing NaN
    bad = norm[..., 0] < 1e-12
    out = q / np.where(norm < 1e-12, 1.0, norm)
    out[bad] = (1.0, 0.0, 0.0, 0.0)
    return out


# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GaussianSet:
    """Parameter arrays of ``n`` control points; absent groups are ``None``."""

    config: DofConfig
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray | None = None
    translations: np.ndarray | None = None
    transform_rotations: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, self.config.scale_dof)
        expected = {
            "rotations": (self.config.shape_rotation, 4),
            "translations": (self.config.translation, 3),
            "transform_rotations": (self.config.transform_rotation, 4),
        }
        for name, (enabled, width) in expected.items():
            arr = getattr(self, name)
            if enabled and arr is None:
                arr = np.tile([1.0, 0, 0, 0], (n, 1)) if width == 4 else np.zeros((n, 3))
            if not enabled and arr is not None:
                raise StructuralError(f"{name} given but disabled by the DoF config")
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64).reshape(n, width)
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.positions)

    def __len__(self):
        return self.n

    def params(self) -> dict[str, np.ndarray]:
        """Enabled parameter arrays in checkpoint block order (live references)."""
        return {k: getattr(self, k) for k in BLOCK_ORDER if getattr(self, k) is not None}

    def num_parameters(self) -> int:
        return self.n * (3 + self.config.dof)

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianSet":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def translation_vectors(self) -> np.ndarray:
        return self.translations if self.translations is not None else np.zeros((self.n, 3))

    def covariance(self, i: int) -> np.ndarray:
        return covariance(self, i)


def covariance(g: GaussianSet, i: int) -> np.ndarray:
    """``R S S^T R^T`` for point ``i`` (``R`` is identity without shape rotation)."""
    s = np.broadcast_to(np.exp(g.log_scales[i]), (3,))
    S = np.diag(s)
    R = quat_to_matrix(g.rotations[i]) if g.rotations is not None else np.eye(3)
    return R @ S @ S.T @ R.T


def init_grid(bounds, grid_shape=(10, 10, 10), config: DofConfig | str = "I") -> GaussianSet:
    """Points on the nodes of a regular lattice spanning ``bounds = (lo, hi)`` inclusively.

    The initial isotropic sigma is half the largest node spacing so neighbouring
    kernels overlap; transforms start at identity.
    """
    config = DofConfig.parse(config)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    grid_shape = tuple(int(s) for s in grid_shape)
    if len(grid_shape) != 3 or min(grid_shape) < 2:
        raise ValidationError(f"grid_shape needs 3 entries >= 2, got {grid_shape}")
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise ValidationError("bounds must be two finite 3-vectors")
    if np.any(hi <= lo):
        raise ValidationError(f"degenerate bounds {lo.tolist()} .. {hi.tolist()}")
    axes = [np.linspace(lo[a], hi[a], grid_shape[a]) for a in range(3)]
    pos = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    node_spacing = (hi - lo) / (np.asarray(grid_shape) - 1)
    sigma = 0.5 * node_spacing.max()
    log_scales = np.full((len(pos), config.scale_dof), np.log(sigma))
    return GaussianSet(config, pos, log_scales)


def clone_points(g: GaussianSet, indices, rng: np.random.Generator,
                 offsets: np.ndarray | None = None) -> GaussianSet:
    """Append copies of ``indices`` displaced by ``N(0, sigma_i^2 I)``.

    sigma_i is the point's own scale (mean of the three axes when diagonal).
    Every other parameter is copied verbatim.
    """
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= g.n):
        raise ValidationError("clone index out of range")
    if offsets is None:
        sigma = np.exp(g.log_scales[idx]).mean(axis=1, keepdims=True)
        offsets = rng.standard_normal((idx.size, 3)) * sigma
    new = {}
    for name, arr in g.params().items():
        extra = arr[idx].copy()
        if name == "positions":
            extra = extra + offsets
        new[name] = np.concatenate([arr, extra])
    return replace(g, **new)


def clone_point(g: GaussianSet, i: int, rng: np.random.Generator) -> GaussianSet:
    return clone_points(g, [i], rng)


def prune_points(g: GaussianSet, indices, n_min: int = 1) -> GaussianSet:
    """Remove ``indices``; survivors keep their relative order."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= g.n):
        raise ValidationError("prune index out of range")
    if len(np.unique(idx)) != idx.size:
        raise ValidationError("prune indices must be unique")
    if g.n - idx.size < n_min:
        raise ValidationError(f"pruning {idx.size} of {g.n} points would go below n_min={n_min}")
    keep = np.ones(g.n, dtype=bool)
    keep[idx] = False
    return replace(g, **{k: v[keep] for k, v in g.params().items()})


def random_prune(g: GaussianSet, ratio: float, rng: np.random.Generator, n_min: int = 1) -> GaussianSet:
    if not 0.0 <= ratio < 1.0:
        raise ValidationError(f"prune ratio must be in [0, 1), got {ratio}")
    count = min(int(round(ratio * g.n)), g.n - n_min)
    if count <= 0:
        return g.copy()
    return prune_points(g, rng.choice(g.n, size=count, replace=False), n_min=n_min)


# ---------------------------------------------------------------------------
# checkpoint: magic, uint32 header length, JSON header, float32 blocks

_MAGIC = b"GCREGCK1"


def save_checkpoint(path, g: GaussianSet, **meta) -> Path:
    """Write ``g`` plus free-form JSON metadata (geometry, k, ...)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = g.params()
    header = {
        "format": "gcreg-checkpoint",
        "version": 1,
        "n": g.n,
        "config": asdict(g.config),
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
        "dtype": "float32",
        "byte_order": "little",
    } | meta
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(head)) + head)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> tuple[GaussianSet, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: corrupt checkpoint header ({e.msg})") from None
    config = DofConfig(**header["config"])
    offset = 12 + hlen
    arrays = {}
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"]))
        chunk = blob[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise StructuralError(f"{path}: truncated block {blk['name']}")
        arrays[blk["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(blk["shape"])
        offset += 4 * count
    if offset != len(blob):
        raise StructuralError(f"{path}: {len(blob) - offset} trailing bytes after parameter blocks")
    g = GaussianSet(config, **arrays)
    if g.n != header["n"]:
        raise StructuralError(f"{path}: header says n={header['n']}, blocks hold {g.n}")
    return g, header
