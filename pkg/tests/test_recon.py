import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from nlos_emd.backproject import ConfidenceMap, ProjectionSelector, back_project
from nlos_emd.emd import Cluster, EllipsoidMode
from nlos_emd.metrics import dilate
from nlos_emd.recon import (FilteredMap, Reconstruction, empty_reconstruction, laplacian,
                            reconstruct_emd, reconstruct_general, sharpen, threshold)
from nlos_emd.scene import VoxelGridSpec
import oracles


def grid_of(nz, ny, nx):
    return VoxelGridSpec(origin=(0, 0, 0), extent=(nx, ny, nz), dims=(nx, ny, nz))


def cmap(vol):
    vol = np.asarray(vol, dtype=float)
    return ConfidenceMap(grid_of(*vol.shape), vol.ravel())


shape3 = st.tuples(st.integers(3, 7), st.integers(3, 7), st.integers(3, 7))
vols = shape3.flatmap(lambda s: hnp.arrays(np.float64, s, elements=st.floats(0, 1e6)))


@given(shape3, st.floats(0, 1e12))
def test_laplacian_annihilates_constants(shape, c):
    f = laplacian(cmap(np.full(shape, c)))
    assert np.all(f.values == 0.0)


def test_laplacian_unit_impulse():
    vol = np.zeros((7, 7, 7))
    vol[3, 3, 3] = 1
    f = laplacian(cmap(vol)).volume()
    assert f[3, 3, 3] == -6
    for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        assert f[3 + dz, 3 + dy, 3 + dx] == 1
    assert np.count_nonzero(f) == 7


@given(vols)
def test_laplacian_matches_stencil_loop(vol):
    assert laplacian(cmap(vol)).volume().tolist() == oracles.laplacian(vol.tolist())


@given(vols, st.floats(-3, 3), st.floats(-3, 3))
def test_laplacian_linear(vol, a, b):
    other = np.flip(vol, axis=0).copy()
    g = grid_of(*vol.shape)
    lhs = laplacian(FilteredMap(g, (a * vol + b * other).ravel())).values
    rhs = a * laplacian(cmap(vol)).values + b * laplacian(cmap(other)).values
    scale = max(1.0, float(np.abs(vol).max() + np.abs(other).max()) * (abs(a) + abs(b)))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * 12 * scale)


def test_laplacian_needs_three_per_axis():
    with pytest.raises(ValueError):
        laplacian(cmap(np.zeros((2, 5, 5))))


def fm(values):
    v = np.asarray(values, dtype=float)
    return FilteredMap(VoxelGridSpec(origin=(0, 0, 0), extent=(v.size, 1, 1), dims=(v.size, 1, 1)), v)


def test_threshold_examples():
    assert threshold(fm([1, 4, 10]), 0.5).tolist() == [2]
    assert threshold(fm([1, 6, 10, 5]), 0.5).tolist() == [1, 2]
    assert threshold(fm([-2, 0, 1e-9, 3]), 1e-12).tolist() == [2, 3]


def test_threshold_nonpositive_max_is_empty(caplog):
    with caplog.at_level(logging.WARNING):
        assert threshold(fm([-1, -2, 0]), 0.3).size == 0
    assert "no positive values" in caplog.text


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
def test_threshold_beta_range(beta):
    with pytest.raises(ValueError):
        threshold(fm([1, 2]), beta)


@given(hnp.arrays(np.float64, 64, elements=st.floats(-1e6, 1e6)), st.integers(-40, 40),
       st.floats(0.01, 0.99))
def test_threshold_scale_invariant_powers_of_two(v, e, beta):
    k = 2.0 ** e
    assert threshold(fm(k * v), beta).tolist() == threshold(fm(v), beta).tolist()


@given(hnp.arrays(np.float64, 64, elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3),
       st.floats(0.01, 0.99))
def test_threshold_scale_invariant_general_k(v, k, beta):
    # Arbitrary k rounds both sides; only voxels within rounding of the cut may flip.
    top = v.max()
    if not top > 0:
        return
    near = np.abs(v - beta * top) <= 1e-12 * top
    a = set(threshold(fm(k * v), beta).tolist())
    b = set(threshold(fm(v), beta).tolist())
    assert a ^ b <= set(np.flatnonzero(near).tolist())


def test_general_single_point_survives():
    vol = np.zeros((9, 9, 9))
    vol[4, 5, 3] = 100.0
    vol[4, 5, 4] = 50.0
    r = reconstruct_general(cmap(vol), 0.3)
    v = 3 + 9 * (5 + 9 * 4)
    assert v in r.voxels(1) and r.status == "ok"


def test_general_single_point_from_back_projection(desk):
    # Back projection of a single voxel-centered point on the desk setup.
    from nlos_emd.forward import ForwardParams, simulate
    from nlos_emd.scene import SceneDescription, SceneObject
    g = desk.grid
    v = g.ijk_to_index(20, 26, 10)
    sc = SceneDescription(geom=desk.scene.geom,
                          objects=(SceneObject("p", g.center(v)[None], 1.0),))
    h = simulate(sc, None, desk.axis, ForwardParams(photon_scale=1e3, quantize=True))
    r = reconstruct_general(back_project(h, desk.index), 0.5)
    assert v in r.voxels(1)


def test_general_empty_map():
    r = reconstruct_general(cmap(np.zeros((4, 4, 4))), 0.3)
    assert r.is_empty() and r.status == "empty"


def mode(rank, vol):
    m = cmap(vol)
    return EllipsoidMode(rank, ProjectionSelector.empty(1, 1), m, Cluster(0, np.array([0]), 0.0))


def test_emd_one_mode_equals_general(rng):
    vol = rng.random((6, 7, 8)) * 100
    a = reconstruct_emd([mode(1, vol)], 0.4)
    b = reconstruct_general(cmap(vol), 0.4)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_emd_disjoint_modes_partition_survivors():
    a, b = np.zeros((7, 7, 7)), np.zeros((7, 7, 7))
    a[2, 2, 2], b[5, 5, 5] = 10.0, 0.01
    r = reconstruct_emd([mode(1, a), mode(2, b)], 0.5)
    assert r.voxels(1).tolist() == [2 + 7 * (2 + 7 * 2)]
    assert r.voxels(2).tolist() == [5 + 7 * (5 + 7 * 5)]
    assert r.num_objects == 2


def test_emd_conflict_goes_to_lower_rank():
    a = np.zeros((5, 5, 5))
    a[2, 2, 2] = 1.0
    r = reconstruct_emd([mode(2, a), mode(1, 3 * a)], 0.5)
    assert r.voxels(1).tolist() == [62] and r.voxels(2).size == 0


def test_emd_per_mode_override():
    a = np.zeros((5, 5, 5))
    a[2, 2, 2], a[2, 2, 3] = 10.0, 9.0
    r = reconstruct_emd([mode(1, a)], 0.9, betas={1: 0.1})
    assert r.counts[1] == len(threshold(sharpen(cmap(a)), 0.1))


def test_emd_all_empty(caplog):
    with caplog.at_level(logging.WARNING):
        r = reconstruct_emd([mode(1, np.zeros((4, 4, 4)))], 0.5)
    assert r.status == "empty" and r.is_empty()
    with pytest.raises(ValueError):
        reconstruct_emd([], 0.5)


@given(st.lists(hnp.arrays(np.float64, (4, 5, 6), elements=st.floats(0, 100)), min_size=1, max_size=4),
       st.floats(0.05, 0.95))
def test_emd_labels_survive_own_mode(vols, beta):
    modes = [mode(k + 1, v) for k, v in enumerate(vols)]
    r = reconstruct_emd(modes, beta)
    assert r.num_objects <= len(modes)
    assert int(r.labels.max()) <= len(modes)
    for m in modes:
        own = set(threshold(sharpen(m.map), beta).tolist())
        assert set(r.voxels(m.object_rank).tolist()) <= own


def test_reconstruction_bookkeeping():
    g = grid_of(3, 3, 3)
    labels = np.zeros(27, dtype=np.uint16)
    labels[[0, 1]] = 1
    r = Reconstruction(g, labels)
    assert r.counts == {1: 2}
    np.testing.assert_allclose(r.centroids[1], [1.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        Reconstruction(g, np.zeros(5))
    assert empty_reconstruction(g).is_empty()


def test_desk_general_keeps_only_the_square(desk):
    r = reconstruct_general(desk.dec.initial, 0.5)
    near_square = dilate(desk.grid, desk.truth["square"], 2)
    assert r.voxels(1).size > 0
    assert np.all(np.isin(r.voxels(1), near_square))


def test_desk_emd_recovers_all_three_at_one_beta(desk):
    r = reconstruct_emd(desk.dec.modes, desk.defaults["beta"])
    assert r.num_objects == 3 and all(n > 0 for n in r.counts.values())
