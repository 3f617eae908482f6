"""Linear-blend-skinning displacement from the K nearest Gaussian control points.

For a point ``x`` with neighbours ``k``::

    w_hat_k = N(x; mu_k, Sigma_k)               (full Gaussian density)
    w_k     = w_hat_k / sum(w_hat)              (uniform 1/K if the sum underflows)
    phi_k   = R'_k (x - mu_k) + mu_k + T_k - x
    Phi(x)  = sum_k w_k phi_k

The backward pass is written out by hand. Neighbour sets are held fixed
within a step, so there is no gradient through the KNN selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .control_points import GaussianSet, quat_matrix_jacobian, quat_to_matrix
from .errors import UsageError
from .spatial_index import NeighborList, SpatialIndex

log = logging.getLogger(__name__)

_LOG_NORM = -1.5 * np.log(2 * np.pi)


@dataclass(eq=False)
class DisplacementBatch:
    points: np.ndarray
    neighbors: NeighborList
    weights: np.ndarray
    displacements: np.ndarray
    fallback: np.ndarray          # (m,) rows that fell back to uniform weights
    n_gaussians: int
    tape: dict | None = field(default=None, repr=False)

    @property
    def underflow_count(self) -> int:
        return int(self.fallback.sum())


def _kernel_terms(g: GaussianSet, points, idx):
    d = points[:, None, :] - g.positions[idx]
    ls = g.log_scales[idx]
    inv_s = np.broadcast_to(np.exp(-ls), d.shape)
    Rs = None
    if g.rotations is not None:
        Rs = quat_to_matrix(g.rotations)[idx]
        u = np.einsum("mkji,mkj->mki", Rs, d)
    else:
        u = d
    z = u * inv_s
    mah = np.einsum("mki,mki->mk", z, z)
    half_logdet = 3.0 * ls[..., 0] if ls.shape[-1] == 1 else ls.sum(-1)
    log_w = _LOG_NORM - half_logdet - 0.5 * mah
    return d, inv_s, Rs, z, mah, log_w


def _normalize(w_hat):
    total = w_hat.sum(axis=1)
    fallback = ~(np.isfinite(total) & (total > 0))
    safe = np.where(fallback, 1.0, total)
    w = w_hat / safe[:, None]
    if fallback.any():
        w[fallback] = 1.0 / w_hat.shape[1]
    return w, fallback


def lbs_weights(g: GaussianSet, neighbors: NeighborList, points) -> np.ndarray:
    """Normalised skinning weights ``(m, K)``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    *_, log_w = _kernel_terms(g, points, neighbors.indices)
    w, _ = _normalize(np.exp(log_w))
    return w


def _contributions(g: GaussianSet, d, idx):
    phi = np.zeros_like(d)
    if g.translations is not None:
        phi += g.translations[idx]
    Rt = None
    if g.transform_rotations is not None:
        Rt = quat_to_matrix(g.transform_rotations)[idx]
        phi += np.einsum("mkij,mkj->mki", Rt, d) - d
    return phi, Rt


def lbs_displace(g: GaussianSet, points, neighbors: NeighborList, weights) -> np.ndarray:
    """Blend the per-neighbour rigid displacements with ``weights``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = points[:, None, :] - g.positions[neighbors.indices]
    phi, _ = _contributions(g, d, neighbors.indices)
    return np.einsum("mk,mki->mi", weights, phi)


def lbs_forward(g: GaussianSet, points, neighbors: NeighborList, keep_tape: bool = True) -> DisplacementBatch:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = neighbors.indices
    d, inv_s, Rs, z, mah, log_w = _kernel_terms(g, points, idx)
    w, fallback = _normalize(np.exp(log_w))
    phi, Rt = _contributions(g, d, idx)
    disp = np.einsum("mk,mki->mi", w, phi)
    if fallback.any():
        log.debug("weight underflow at %d of %d points", fallback.sum(), len(points))
    tape = None
    if keep_tape:
        tape = dict(d=d, inv_s=inv_s, Rs=Rs, z=z, mah=mah, phi=phi, Rt=Rt)
    return DisplacementBatch(points, neighbors, w, disp, fallback, g.n, tape)


def _scatter(idx, values, n):
    """Sum ``values[m, k, ...]`` into per-Gaussian slots (deterministic)."""
    flat = idx.ravel()
    vals = values.reshape(flat.size, -1)
    out = np.empty((n, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(flat, weights=vals[:, c], minlength=n)
    return out


def lbs_backward(batch: DisplacementBatch, upstream, g: GaussianSet) -> dict[str, np.ndarray]:
    """Gradients of ``sum_j upstream_j . Phi_j`` w.r.t. every enabled parameter of ``g``.

    ``g`` must be the set the batch was computed from.
    """
    if batch.tape is None:
        raise UsageError("batch was computed without a tape; rerun lbs_forward(keep_tape=True)")
    if g.n != batch.n_gaussians:
        raise UsageError("Gaussian set changed size since the forward pass")
    t = batch.tape
    G = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)
    idx = batch.neighbors.indices
    w = batch.weights
    n = g.n

    g_phi = np.einsum("mki,mi->mk", t["phi"], G)
    g_disp = np.einsum("mi,mi->m", G, batch.displacements)
    ds = w * (g_phi - g_disp[:, None])           # dL / d log w_hat
    ds[batch.fallback] = 0.0

    v = t["z"] * t["inv_s"]                       # Sigma^-1 d expressed in the shape frame
    sig_inv_d = np.einsum("mkij,mkj->mki", t["Rs"], v) if t["Rs"] is not None else v
    d_mu = ds[..., None] * sig_inv_d
    if t["Rt"] is not None:
        d_mu = d_mu + w[..., None] * (G[:, None, :] - np.einsum("mkji,mj->mki", t["Rt"], G))

    grads = {"positions": _scatter(idx, d_mu, n)}
    if g.log_scales.shape[1] == 1:
        d_ls = (ds * (t["mah"] - 3.0))[..., None]
    else:
        d_ls = ds[..., None] * (t["z"] ** 2 - 1.0)
    grads["log_scales"] = _scatter(idx, d_ls, n)

    if g.rotations is not None:
        J = quat_matrix_jacobian(g.rotations)[idx]
        d_q = -ds[..., None] * np.einsum("mkj,mkpjl,mkl->mkp", t["d"], J, v)
        grads["rotations"] = _scatter(idx, d_q, n)
    if g.translations is not None:
        grads["translations"] = _scatter(idx, w[..., None] * G[:, None, :], n)
    if g.transform_rotations is not None:
        J = quat_matrix_jacobian(g.transform_rotations)[idx]
        d_q = w[..., None] * np.einsum("mi,mkpij,mkj->mkp", G, J, t["d"])
        grads["transform_rotations"] = _scatter(idx, d_q, n)
    return grads


def displacement_field(g: GaussianSet, points, k: int, index: SpatialIndex | None = None,
                       chunk: int = 65536) -> np.ndarray:
    """Evaluate ``Phi`` at arbitrary world points, streaming in chunks."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if index is None:
        index = SpatialIndex(g.positions)
    out = np.empty_like(points)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        batch = lbs_forward(g, p, index.knn(p, k), keep_tape=False)
        out[s:s + chunk] = batch.displacements
    return out
