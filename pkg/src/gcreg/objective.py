"""Registration loss on a random batch of fixed-image voxel centres.

Points live in the fixed image domain; the moving image is resampled at the
displaced locations ``x + Phi(x)``. The loss is the negated global NCC over
the batch, with no regulariser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control_points import GaussianSet
from .deformation import lbs_backward, lbs_forward
from .errors import StructuralError, ValidationError
from .spatial_index import SpatialIndex
from .volume import MaskVolume, Volume3, sample_trilinear, sample_with_gradient

NCC_EPS = 1e-8


@dataclass
class LossReport:
    ncc: float
    batch_size: int
    underflow_count: int = 0
    step: int = 0


def sample_batch(fixed: Volume3, batch_size: int, rng: np.random.Generator,
                 mask: MaskVolume | None = None) -> np.ndarray:
    """Uniform voxel centres (with replacement) in world mm, optionally limited to ``mask > 0``."""
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2 for NCC")
    geom = fixed.geometry
    if mask is None:
        flat = rng.integers(0, geom.size, size=batch_size)
    else:
        if mask.dims != geom.dims:
            raise StructuralError(f"mask dims {mask.dims} differ from fixed dims {geom.dims}")
        candidates = np.flatnonzero(mask.data > 0)
        if candidates.size == 0:
            raise ValidationError("mask selects no voxels")
        flat = candidates[rng.integers(0, candidates.size, size=batch_size)]
    return geom.voxel_centers(flat)


def ncc_loss(fixed_vals, warped_vals) -> tuple[float, np.ndarray]:
    """Negated NCC and its derivative w.r.t. ``warped_vals``."""
    a = np.asarray(fixed_vals, dtype=np.float64)
    b = np.asarray(warped_vals, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError("ncc_loss needs two equal-length 1-D arrays with at least 2 values")
    a = a - a.mean()
    b = b - b.mean()
    saa = a @ a
    sbb = b @ b
    sab = a @ b
    den = np.sqrt(saa * sbb + NCC_EPS)
    loss = -sab / den
    # d(sab)/db_i = a_i and d(sbb)/db_i = 2 b_i once the mean subtraction is chained through
    grad = -(a / den - sab * saa * b / den**3)
    return float(loss), grad


def evaluate(g: GaussianSet, fixed: Volume3, moving: Volume3, points, index: SpatialIndex,
             k: int, fixed_vals=None, with_grad: bool = True):
    """Loss report and parameter gradients for one batch.

    ``index`` must have been built over ``g.positions`` (possibly stale by
    the trainer's refresh schedule). Returns ``(report, grads, batch)``;
    ``grads`` is ``None`` when ``with_grad`` is false.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    neighbors = index.knn(points, k)
    batch = lbs_forward(g, points, neighbors, keep_tape=with_grad)
    if fixed_vals is None:
        fixed_vals = sample_trilinear(fixed, points)
    warped_at = points + batch.displacements
    if not with_grad:
        loss, _ = ncc_loss(fixed_vals, sample_trilinear(moving, warped_at))
        return LossReport(loss, len(points), batch.underflow_count), None, batch
    warped, img_grad = sample_with_gradient(moving, warped_at)
    loss, d_warped = ncc_loss(fixed_vals, warped)
    upstream = d_warped[:, None] * img_grad
    grads = lbs_backward(batch, upstream, g)
    return LossReport(loss, len(points), batch.underflow_count), grads, batch
