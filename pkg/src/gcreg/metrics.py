"""Landmark error, label overlap and dense-field export.

Direction convention: fixed-image landmarks are pushed through ``x + Phi(x)``
and compared with the moving-image landmarks, the same direction in which the
trainer samples the moving image.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .control_points import GaussianSet
from .deformation import displacement_field
from .errors import ValidationError
from .spatial_index import SpatialIndex
from .volume import (Geometry, LandmarkSet, MaskVolume, Volume3, sample_nearest,
                     sample_trilinear, write_dvf_chunks)

log = logging.getLogger(__name__)

DIRECTION = "fixed landmarks mapped by x + Phi(x), compared with moving landmarks"
STD_TYPE = "population"
# points per chunk times k; bounds the (m, k, 3) temporaries of the forward pass
_CHUNK_ENTRIES = 1 << 18


def warp_landmarks(g: GaussianSet, landmarks: LandmarkSet, k: int,
                   index: SpatialIndex | None = None) -> LandmarkSet:
    pts = landmarks.points
    if len(pts) == 0:
        return LandmarkSet(pts)
    return LandmarkSet(pts + displacement_field(g, pts, k, index))


def tre(a: LandmarkSet, b: LandmarkSet):
    """``(mean, std, per_landmark)`` Euclidean distances in mm; population std."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ValidationError(f"landmark sets differ in length: {len(pa)} vs {len(pb)}")
    if len(pa) == 0:
        raise ValidationError("need at least one landmark pair")
    d = np.linalg.norm(pa - pb, axis=1)
    return float(d.mean()), float(d.std()), d


def _points(lm) -> np.ndarray:
    return lm.points if isinstance(lm, LandmarkSet) else LandmarkSet(lm).points


def dsc(fixed_mask: Volume3, warped_mask: Volume3, label) -> float:
    """Dice overlap of the voxels equal to ``label``; 1.0 when both are empty."""
    if fixed_mask.dims != warped_mask.dims:
        raise ValidationError(f"mask dims differ: {fixed_mask.dims} vs {warped_mask.dims}")
    a = fixed_mask.array == label
    b = warped_mask.array == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        log.info("label %s absent from both masks; DSC taken as 1.0", label)
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _warped_centers(g, geometry: Geometry, k, index):
    if index is None:
        index = SpatialIndex(g.positions)
    chunk = max(256, _CHUNK_ENTRIES // max(int(k), 1))
    for s in range(0, geometry.size, chunk):
        x = geometry.voxel_centers(np.arange(s, min(s + chunk, geometry.size)))
        yield x, displacement_field(g, x, k, index, chunk=chunk)


def warp_mask(g: GaussianSet, moving_mask: MaskVolume, fixed_geometry: Geometry, k: int,
              index: SpatialIndex | None = None) -> MaskVolume:
    """Nearest-neighbour pull of ``moving_mask`` onto the fixed grid, so labels never blend."""
    out = np.empty(fixed_geometry.size, dtype=moving_mask.array.dtype)
    s = 0
    for x, phi in _warped_centers(g, fixed_geometry, k, index):
        out[s:s + len(x)] = sample_nearest(moving_mask, x + phi)
        s += len(x)
    return MaskVolume(fixed_geometry, out)


def warp_volume(g: GaussianSet, moving: Volume3, fixed_geometry: Geometry, k: int,
                index: SpatialIndex | None = None) -> Volume3:
    """Trilinear pull of ``moving`` onto the fixed grid."""
    out = np.empty(fixed_geometry.size, dtype=np.float32)
    s = 0
    for x, phi in _warped_centers(g, fixed_geometry, k, index):
        out[s:s + len(x)] = sample_trilinear(moving, x + phi)
        s += len(x)
    return Volume3(fixed_geometry, out)


def export_dense_dvf(g: GaussianSet, geometry: Geometry, path, k: int,
                     index: SpatialIndex | None = None) -> Path:
    """Evaluate ``Phi`` at every voxel centre and stream it to ``path`` chunk by chunk."""
    chunks = (phi for _, phi in _warped_centers(g, geometry, k, index))
    return write_dvf_chunks(chunks, geometry, path)


def evaluation_report(g: GaussianSet, k: int, landmarks_fixed: LandmarkSet | None = None,
                      landmarks_moving: LandmarkSet | None = None,
                      fixed_mask: MaskVolume | None = None, moving_mask: MaskVolume | None = None,
                      wall_clock_s: float | None = None) -> dict:
    """Assemble the JSON-ready evaluation report from whichever inputs are given."""
    have_lm = landmarks_fixed is not None and landmarks_moving is not None
    have_seg = fixed_mask is not None and moving_mask is not None
    if not (have_lm or have_seg):
        raise ValidationError("evaluation needs landmark pairs or segmentation pairs")
    index = SpatialIndex(g.positions)
    report: dict = {"n_gaussians": g.n, "wall_clock_s": wall_clock_s}
    if have_lm:
        warped = warp_landmarks(g, landmarks_fixed, k, index)
        mean, std, per = tre(warped, landmarks_moving)
        report.update(mean_tre_mm=mean, std_tre_mm=std, std_type=STD_TYPE,
                      per_landmark=per.tolist(), direction=DIRECTION)
    if have_seg:
        warped_mask = warp_mask(g, moving_mask, fixed_mask.geometry, k, index)
        labels = sorted((set(fixed_mask.labels()) | set(moving_mask.labels())) - {0})
        per_label = {str(lab): dsc(fixed_mask, warped_mask, lab) for lab in labels}
        report["dsc_per_label"] = per_label
        report["dsc_mean"] = float(np.mean(list(per_label.values()))) if per_label else None
    return report
