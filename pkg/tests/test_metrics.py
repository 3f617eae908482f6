import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcreg.control_points import DOF_CONFIGS, GaussianSet, init_grid
from gcreg.deformation import displacement_field
from gcreg.errors import ValidationError
from gcreg.metrics import (dsc, evaluation_report, export_dense_dvf, tre, warp_landmarks, warp_mask,
                           warp_volume)
from gcreg.volume import Geometry, LandmarkSet, MaskVolume, Volume3, read_dvf

from test_control_points import random_set


def global_shift(t, config="I"):
    return GaussianSet(DOF_CONFIGS[config], [[0.0, 0, 0]], [[np.log(100.0)]], translations=[t])


def test_tre_345():
    mean, std, per = tre(LandmarkSet([[0.0, 0, 0]]), LandmarkSet([[3.0, 4, 0]]))
    assert mean == 5.0 and std == 0.0 and per.tolist() == [5.0]


def test_tre_identical_and_mismatch(rng):
    a = LandmarkSet(rng.normal(size=(9, 3)))
    assert tre(a, a)[:2] == (0.0, 0.0)
    with pytest.raises(ValidationError):
        tre(a, LandmarkSet(rng.normal(size=(8, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tre_symmetric_population_std(seed):
    r = np.random.default_rng(seed)
    a, b = LandmarkSet(r.normal(size=(6, 3))), LandmarkSet(r.normal(size=(6, 3)))
    m1, s1, _ = tre(a, b)
    m2, s2, per = tre(b, a)
    assert m1 == m2 and s1 == s2 and m1 > 0
    assert s1 == pytest.approx(np.sqrt(np.mean((per - per.mean()) ** 2)))


def mask(geom, flat_indices, label=1):
    arr = np.zeros(geom.size, dtype=int)
    arr[list(flat_indices)] = label
    return MaskVolume(geom, arr)


def test_dsc_examples():
    geom = Geometry((10, 10, 10))
    a = mask(geom, range(0, 100))
    assert dsc(a, a, 1) == 1.0
    assert dsc(a, mask(geom, range(200, 300)), 1) == 0.0
    assert dsc(a, mask(geom, range(50, 150)), 1) == 0.5
    assert dsc(a, a, 7) == 1.0
    with pytest.raises(ValidationError):
        dsc(a, mask(Geometry((10, 10, 9)), []), 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dsc_bounds_and_symmetry(seed):
    r = np.random.default_rng(seed)
    geom = Geometry((6, 6, 6))
    a = MaskVolume(geom, r.integers(0, 3, geom.size))
    b = MaskVolume(geom, r.integers(0, 3, geom.size))
    for lab in (1, 2):
        d = dsc(a, b, lab)
        assert 0 <= d <= 1 and d == dsc(b, a, lab)


def test_warp_landmarks_identity_and_constant(rng):
    lm = LandmarkSet(rng.uniform(0, 20, size=(10, 3)))
    zero = init_grid((np.zeros(3), np.full(3, 20.0)), (3, 3, 3))
    assert np.array_equal(warp_landmarks(zero, lm, 10).points, lm.points)
    shifted = warp_landmarks(global_shift([1.0, 0, 0]), lm, 10).points
    assert np.allclose(shifted - lm.points, [1.0, 0, 0], atol=1e-12)


def test_warp_mask_identity_shift_and_closure(rng):
    geom = Geometry((8, 8, 8), (2.0, 2.0, 2.0))
    labels = MaskVolume(geom, rng.integers(0, 4, geom.size))
    zero = init_grid(geom.bounds(), (3, 3, 3))
    assert np.array_equal(warp_mask(zero, labels, geom, 8).data, labels.data)
    moved = warp_mask(global_shift([2.0, 0, 0]), labels, geom, 1)
    assert np.array_equal(moved.array[:-1], labels.array[1:])
    smooth = random_set(rng, "VI", 12)
    smooth.positions[:] = rng.uniform(0, 14, size=(12, 3))
    smooth.log_scales[:] = np.log(4.0)
    out = warp_mask(smooth, labels, geom, 6)
    assert set(np.unique(out.data)) <= set(np.unique(labels.data))


def test_warp_volume_identity(rng):
    geom = Geometry((6, 7, 8))
    v = Volume3(geom, rng.normal(size=geom.size))
    zero = init_grid(geom.bounds(), (2, 2, 2))
    assert np.array_equal(warp_volume(zero, v, geom, 4).data, v.data)


def test_export_zero_and_constant(tmp_path):
    geom = Geometry((5, 6, 7), (1.5, 1.0, 2.0))
    zero = init_grid(geom.bounds(), (2, 2, 2))
    f, g2 = read_dvf(export_dense_dvf(zero, geom, tmp_path / "z.json", 4))
    assert g2 == geom and np.all(f == 0)
    t = [0.25, -1.5, 3.0]
    f, _ = read_dvf(export_dense_dvf(global_shift(t), geom, tmp_path / "c.json", 1))
    assert np.allclose(f, t, atol=1e-6)


def test_export_matches_direct_evaluation(tmp_path, rng):
    geom = Geometry((12, 10, 9), (1.0, 1.2, 2.0), (-3.0, 0.0, 5.0))
    g = random_set(rng, "VI", 20)
    g.positions[:] = rng.uniform(geom.bounds()[0], geom.bounds()[1], size=(20, 3))
    g.log_scales[:] = np.log(3.0)
    f, _ = read_dvf(export_dense_dvf(g, geom, tmp_path / "f.json", 6))
    flat = rng.choice(geom.size, size=100, replace=False)
    direct = displacement_field(g, geom.voxel_centers(flat), 6)
    assert np.allclose(f[flat], direct, rtol=0, atol=1e-6)


@pytest.mark.slow
def test_export_memory_contract(tmp_path):
    geom = Geometry((256, 256, 94), (0.97, 0.97, 2.5))
    g = init_grid(geom.bounds(), (10, 10, 10), "I")
    g.translations[:] = np.random.default_rng(0).normal(size=g.translations.shape)
    tracemalloc.start()
    try:
        export_dense_dvf(g, geom, tmp_path / "f.json", 10)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert (tmp_path / "f.raw").stat().st_size == geom.size * 12
    assert peak < 2 * geom.size * 12


def test_report_layout(rng):
    geom = Geometry((6, 6, 6))
    zero = init_grid(geom.bounds(), (2, 2, 2))
    lm = LandmarkSet(rng.uniform(0, 5, size=(4, 3)))
    seg = MaskVolume(geom, rng.integers(0, 3, geom.size))
    rep = evaluation_report(zero, 4, lm, lm, seg, seg, wall_clock_s=1.5)
    assert rep["mean_tre_mm"] == 0.0 and rep["std_type"] == "population"
    assert rep["dsc_per_label"] == {"1": 1.0, "2": 1.0} and rep["dsc_mean"] == 1.0
    assert rep["n_gaussians"] == 8 and "direction" in rep
    with pytest.raises(ValidationError):
        evaluation_report(zero, 4)
