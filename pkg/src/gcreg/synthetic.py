"""Synthetic registration cases with closed-form ground truth.

The phantom is used as the *moving* image and the fixed image is pulled back
through the analytic field, ``fixed(x) = moving(x + Phi(x))``. Correspondence
is therefore exact by construction and no field inversion is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import ValidationError
from .volume import (Geometry, LandmarkSet, Volume3, load_landmarks, load_volume,
                     sample_trilinear, save_landmarks, save_volume)

WARP_KINDS = ("constant_shift", "affine", "gaussian_bumps")


# ---------------------------------------------------------------------------
# phantom

def make_phantom(dims, spacing=(1.0, 1.0, 1.0), seed: int = 0, origin=(0.0, 0.0, 0.0),
                 n_waves: int = 32, wavelengths=(0.05, 0.6), slope: float = 1.0) -> Volume3:
    """Smooth textured volume: band-limited sinusoids plus a soft-edged ellipsoid.

    Intensities sit around 1000 with a few hundred units of contrast, roughly
    CT-like and deliberately unnormalised.
    """
    geom = Geometry(dims, spacing, origin)
    if min(geom.dims) < 16:
        raise ValidationError(f"phantom needs at least 16 voxels per axis, got {geom.dims}")
    rng = np.random.default_rng(seed)
    lo, hi = geom.bounds()
    extent = (hi - lo).min()
    center = 0.5 * (lo + hi)

    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wl_lo, wl_hi = wavelengths
    wavelengths = np.exp(rng.uniform(np.log(wl_lo), np.log(wl_hi), n_waves)) * extent
    kvec = dirs * (2 * np.pi / wavelengths)[:, None]
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    amps = rng.uniform(20.0, 60.0, n_waves) * (wavelengths / wavelengths.max()) ** slope

    semi = rng.uniform(0.22, 0.32, 3) * (hi - lo)
    edge = 1.5 * max(geom.spacing)

    pts = geom.voxel_centers()
    vals = np.full(len(pts), 1000.0)
    for s in range(0, len(pts), 1 << 18):
        p = pts[s:s + (1 << 18)]
        vals[s:s + len(p)] += np.sin(p @ kvec.T + phases) @ amps
        r = np.sqrt((((p - center) / semi) ** 2).sum(1))
        vals[s:s + len(p)] += 300.0 / (1.0 + np.exp((r - 1.0) * semi.min() / edge))
    return Volume3(geom, vals.astype(np.float32))


# ---------------------------------------------------------------------------
# analytic fields

class AnalyticField:
    kind = ""

    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, points) -> np.ndarray:
        """``dPhi_i/dx_j`` at each point, shape ``(m, 3, 3)``."""
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_json(d: dict) -> "AnalyticField":
        kind = d["kind"]
        if kind == "constant_shift":
            return ConstantShift(d["shift"])
        if kind == "affine":
            return AffineField(d["matrix"], d["offset"])
        if kind == "gaussian_bumps":
            return GaussianBumps(d["centers"], d["amplitudes"], d["radii"])
        raise ValidationError(f"unknown field kind {kind!r}")


class ConstantShift(AnalyticField):
    kind = "constant_shift"

    def __init__(self, shift):
        self.shift = np.asarray(shift, dtype=np.float64).reshape(3)

    def __call__(self, points):
        pts = np.atleast_2d(points)
        return np.broadcast_to(self.shift, pts.shape).copy()

    def jacobian(self, points):
        return np.zeros((len(np.atleast_2d(points)), 3, 3))

    def to_json(self):
        return {"kind": self.kind, "shift": self.shift.tolist()}


class AffineField(AnalyticField):
    """``Phi(x) = A x + b - x``."""

    kind = "affine"

    def __init__(self, matrix, offset):
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        self.offset = np.asarray(offset, dtype=np.float64).reshape(3)

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ (self.matrix - np.eye(3)).T + self.offset

    def jacobian(self, points):
        return np.broadcast_to(self.matrix - np.eye(3), (len(np.atleast_2d(points)), 3, 3)).copy()

    def to_json(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist(), "offset": self.offset.tolist()}


class GaussianBumps(AnalyticField):
    """Sum of radial Gaussian-windowed displacement vectors."""

    kind = "gaussian_bumps"

    def __init__(self, centers, amplitudes, radii):
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.amplitudes = np.asarray(amplitudes, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(-1)

    def _window(self, pts):
        d = pts[:, None, :] - self.centers[None]
        return d, np.exp(-0.5 * (d ** 2).sum(-1) / self.radii**2)

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, win = self._window(pts)
        return win @ self.amplitudes

    def jacobian(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d, win = self._window(pts)
        dwin = -win[..., None] * d / self.radii[None, :, None] ** 2
        return np.einsum("bi,mbj->mij", self.amplitudes, dwin)

    def to_json(self):
        return {"kind": self.kind, "centers": self.centers.tolist(),
                "amplitudes": self.amplitudes.tolist(), "radii": self.radii.tolist()}


def peak_magnitude(field: AnalyticField, bounds, n_probe: int = 4096, seed: int = 0) -> float:
    """Maximum of ``|Phi|`` over the box: dense probing refined by L-BFGS-B."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = np.random.default_rng(seed)
    probe = rng.uniform(lo, hi, size=(n_probe, 3))
    if isinstance(field, GaussianBumps):
        probe = np.concatenate([probe, np.clip(field.centers, lo, hi)])
    mags = np.linalg.norm(field(probe), axis=1)
    best = float(mags.max())

    def neg(x):
        phi = field(x)[0]
        m = np.linalg.norm(phi)
        g = -(field.jacobian(x)[0].T @ phi) / m if m > 0 else np.zeros(3)
        return -m, g

    for start in probe[np.argsort(mags)[-8:]]:
        res = minimize(neg, start, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        best = max(best, -float(res.fun))
    return best


def make_warp(kind: str, magnitude: float, seed: int = 0, bounds=None, *,
              n_bumps: int = 3, centers=None, radii=None) -> AnalyticField:
    """Closed-form displacement field whose peak ``|Phi|`` over ``bounds`` is ``magnitude``.

    ``bounds`` defaults to ``[0, 64]^3``; ``centers``/``radii`` pin the bumps
    (used to confine motion to one region).
    """
    if magnitude <= 0:
        raise ValidationError("warp magnitude must be > 0")
    if kind not in WARP_KINDS:
        raise ValidationError(f"unknown warp kind {kind!r}; expected one of {WARP_KINDS}")
    if bounds is None:
        bounds = (np.zeros(3), np.full(3, 64.0))
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    ext = hi - lo
    rng = np.random.default_rng(seed)

    if kind == "constant_shift":
        return ConstantShift([magnitude, 0.0, 0.0])

    if kind == "affine":
        mid = 0.5 * (lo + hi)
        L = rng.normal(size=(3, 3))
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(3, -1).T - mid
        peak = np.linalg.norm(corners @ L.T, axis=1).max()
        A = np.eye(3) + L * (magnitude / peak)
        return AffineField(A, mid - A @ mid)

    if centers is None:
        n_bumps = int(np.clip(n_bumps, 1, 5))
        centers = rng.uniform(lo + 0.3 * ext, hi - 0.3 * ext, size=(n_bumps, 3))
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) > 5:
        raise ValidationError("at most 5 bumps")
    if radii is None:
        radii = rng.uniform(0.18, 0.26, len(centers)) * ext.min()
    dirs = rng.normal(size=(len(centers), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    field = GaussianBumps(centers, dirs, radii)
    field.amplitudes *= magnitude / peak_magnitude(field, (lo, hi), seed=seed)
    return field


# ---------------------------------------------------------------------------
# cases

@dataclass(eq=False)
class SyntheticCase:
    fixed: Volume3
    moving: Volume3
    field: AnalyticField
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    manifest: dict

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_volume(self.fixed, out / "fixed.json")
        save_volume(self.moving, out / "moving.json")
        save_landmarks(self.landmarks_fixed, out / "landmarks_fixed.csv")
        save_landmarks(self.landmarks_moving, out / "landmarks_moving.csv")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2) + "\n")
        return out


def load_case(case_dir) -> SyntheticCase:
    d = Path(case_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    return SyntheticCase(
        fixed=load_volume(d / "fixed.json"),
        moving=load_volume(d / "moving.json"),
        field=AnalyticField.from_json(manifest["field"]),
        landmarks_fixed=load_landmarks(d / "landmarks_fixed.csv"),
        landmarks_moving=load_landmarks(d / "landmarks_moving.csv"),
        manifest=manifest,
    )


def make_case(phantom: Volume3, field: AnalyticField, n_landmarks: int = 100, seed: int = 0,
              margin: float = 0.1, manifest: dict | None = None) -> SyntheticCase:
    """Pair ``phantom`` (moving) with its pull-back through ``field`` (fixed)."""
    geom = phantom.geometry
    lo, hi = geom.bounds()
    extent = (hi - lo).min()
    peak = peak_magnitude(field, (lo, hi))
    if peak >= 0.25 * extent:
        raise ValidationError(
            f"peak displacement {peak:.3g} mm must stay below a quarter of the extent ({0.25 * extent:.3g} mm)")
    centers = geom.voxel_centers()
    fixed_vals = np.empty(len(centers))
    for s in range(0, len(centers), 1 << 18):
        p = centers[s:s + (1 << 18)]
        fixed_vals[s:s + len(p)] = sample_trilinear(phantom, p + field(p))
    fixed = Volume3(geom, fixed_vals.astype(np.float32))

    rng = np.random.default_rng(seed)
    span = hi - lo
    lf = rng.uniform(lo + margin * span, hi - margin * span, size=(n_landmarks, 3))
    lm = lf + field(lf)
    info = {"field": field.to_json(), "peak_mm": peak, "n_landmarks": n_landmarks,
            "landmark_seed": seed, "geometry": geom.to_json(),
            "direction": "moving = fixed + Phi(fixed)"}
    info.update(manifest or {})
    return SyntheticCase(fixed, phantom, field, LandmarkSet(lf), LandmarkSet(lm), info)
