import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlos_emd.backproject import (UNMAPPED, ProjectionSelector, back_project,
                                  back_project_selected, build_index, ellipsoids_through)
from nlos_emd.forward import HistogramSet
from nlos_emd.scene import SensorGeometry, TimeAxis, VoxelGridSpec, path_length, wall_grid
import oracles

GEOM = SensorGeometry.from_positions((-0.2, 0, 0.15), (-0.2, 0.05, 0.15), (0, 0, 0),
                                     wall_grid((0, 0, 0), (0.5, 0.5), (2, 2)))
GRID = VoxelGridSpec(origin=(-0.3, -0.3, 0.05), extent=(0.6, 0.6, 0.4), dims=(8, 8, 8))
AXIS = TimeAxis(200e-12, 32)
# Long enough for most, not all, voxels: both mapped and unmapped entries occur.


@pytest.fixture(scope="module")
def index():
    return build_index(GEOM, GRID, AXIS)


def hist(counts, geom=GEOM, axis=AXIS):
    return HistogramSet(geom, axis, np.asarray(counts, dtype=float))


def random_counts(seed, p=GEOM.num_image_points, b=AXIS.num_bins):
    return np.random.default_rng(seed).integers(0, 100, (p, b))


def test_unit_grid_has_one_entry_per_image_point():
    g = VoxelGridSpec(origin=(0, 0, 0.2), extent=(0.1, 0.1, 0.1), dims=(1, 1, 1))
    idx = build_index(GEOM, g, AXIS)
    assert idx.bins.shape == (GEOM.num_image_points, 1)
    assert idx.bins.dtype == np.uint32 and idx.nbytes() == 4 * GEOM.num_image_points


def test_index_matches_direct_recomputation(index, rng):
    centers = GRID.centers()
    for _ in range(1000):
        i = int(rng.integers(GEOM.num_image_points))
        v = int(rng.integers(GRID.num_voxels))
        j = AXIS.path_to_bin(path_length(GEOM, i, centers[v]))
        assert index.bins[i, v] == (UNMAPPED if j is None else j)


def test_mapped_counts_per_image_point(index):
    for i in range(GEOM.num_image_points):
        naive = sum(oracles.bin_of(oracles.path(GEOM.laser_pos, GEOM.detector_pos, GEOM.source_point,
                                                GEOM.image_points[i], c), AXIS.bin_width,
                                   AXIS.num_bins) is not None for c in GRID.centers())
        assert index.mapped(i).sum() == naive


def test_more_bins_never_unmaps(index):
    bigger = build_index(GEOM, GRID, TimeAxis(AXIS.bin_width, 96))
    was = index.bins != UNMAPPED
    assert np.all(bigger.bins[was] == index.bins[was])


def test_zero_histograms_zero_map(index):
    m = back_project(hist(np.zeros((4, 32))), index)
    assert m.total() == 0 and np.all(m.values == 0)


def test_single_ellipsoid(index):
    c = np.zeros((4, 32))
    j = int(np.bincount(index.bins[2][index.bins[2] != UNMAPPED]).argmax())
    c[2, j] = 7
    m = back_project(hist(c), index)
    on = index.voxels_of(2, j)
    assert on.size > 0
    assert np.all(m.values[on] == 7)
    assert np.all(np.delete(m.values, on) == 0)


@pytest.mark.parametrize("seed", range(3))
def test_brute_force_oracle(index, seed):
    counts = random_counts(seed)
    m = back_project(hist(counts), index)
    ref = oracles.back_project(counts.tolist(), GEOM.laser_pos, GEOM.detector_pos, GEOM.source_point,
                               GEOM.image_points, GRID.origin, GRID.extent, GRID.dims, AXIS.bin_width)
    np.testing.assert_array_equal(m.values, ref)


def test_selector_identities(index, rng):
    h = hist(random_counts(5))
    full = back_project(h, index)
    np.testing.assert_array_equal(
        back_project_selected(h, index, ProjectionSelector.nonzero(h)).values, full.values)
    assert back_project_selected(h, index, ProjectionSelector.empty(4, 32)).total() == 0


@given(st.integers(0, 2 ** 32 - 1))
def test_complement_split_is_exact(index, seed):
    r = np.random.default_rng(seed)
    h = hist(r.integers(0, 1000, (4, 32)))
    sel = ProjectionSelector(r.random((4, 32)) < 0.5)
    a = back_project_selected(h, index, sel).values
    b = back_project_selected(h, index, ~sel).values
    np.testing.assert_array_equal(a + b, back_project(h, index).values)


@given(st.integers(0, 2 ** 32 - 1))
def test_subset_monotonicity(index, seed):
    r = np.random.default_rng(seed)
    h = hist(r.integers(0, 1000, (4, 32)))
    big = ProjectionSelector(r.random((4, 32)) < 0.6)
    small = big & ProjectionSelector(r.random((4, 32)) < 0.5)
    assert small.issubset(big)
    assert np.all(back_project_selected(h, index, small).values
                  <= back_project_selected(h, index, big).values)


@given(st.integers(0, 2 ** 32 - 1))
def test_linearity(index, seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, 1000, (4, 32)), r.integers(0, 1000, (4, 32))
    np.testing.assert_array_equal(back_project(hist(a + b), index).values,
                                  back_project(hist(a), index).values
                                  + back_project(hist(b), index).values)


def test_conservation(index):
    counts = random_counts(9)
    m = back_project(hist(counts), index)
    sizes = index.shell_sizes()
    assert m.total() == float((counts * sizes).sum())


def test_worker_count_determinism():
    geom = SensorGeometry.from_positions((-0.2, 0, 0.15), (-0.2, 0.05, 0.15), (0, 0, 0),
                                         wall_grid((0, 0, 0), (0.5, 0.5), (7, 7)))
    axis = TimeAxis(50e-12, 128)
    counts = np.random.default_rng(0).random((49, 128)) * 1e3
    h = hist(counts, geom, axis)
    digests = set()
    for w in (1, 2, 8):
        idx = build_index(geom, GRID, axis, workers=w)
        digests.add(back_project(h, idx, workers=w).digest())
    assert len(digests) == 1


def test_mismatch_errors(index):
    other_axis = TimeAxis(AXIS.bin_width, 33)
    with pytest.raises(ValueError, match="time axis"):
        back_project(hist(np.zeros((4, 33)), axis=other_axis), index)
    g2 = SensorGeometry.from_positions((-0.2, 0, 0.16), (-0.2, 0.05, 0.15), (0, 0, 0),
                                       GEOM.image_points)
    with pytest.raises(ValueError, match="geometry"):
        back_project(hist(np.zeros((4, 32)), geom=g2), index)
    with pytest.raises(ValueError, match="selector shape"):
        back_project_selected(hist(np.zeros((4, 32))), index, ProjectionSelector.empty(4, 31))


def test_ellipsoids_through_one_voxel(index):
    v = GRID.num_voxels // 2
    sel = ellipsoids_through(index, [v])
    for i in range(4):
        assert sel.bins(i).tolist() == ([] if index.bins[i, v] == UNMAPPED else [index.bins[i, v]])


def test_ellipsoids_through_whole_grid(index):
    sel = ellipsoids_through(index, np.arange(GRID.num_voxels))
    for i in range(4):
        mapped = index.bins[i][index.bins[i] != UNMAPPED]
        assert sel.bins(i).tolist() == sorted(set(mapped.tolist()))


@given(st.sets(st.integers(0, GRID.num_voxels - 1), max_size=40))
def test_ellipsoids_through_brute_force(index, voxels):
    sel = ellipsoids_through(index, sorted(voxels))
    ref = {(i, int(index.bins[i, v])) for i in range(4) for v in voxels if index.bins[i, v] != UNMAPPED}
    assert set(sel.pairs()) == ref


def test_ellipsoids_through_rejects_out_of_grid(index):
    with pytest.raises(ValueError):
        ellipsoids_through(index, [GRID.num_voxels])
    with pytest.raises(ValueError):
        ellipsoids_through(index, [-1])


def test_selector_set_algebra():
    a = ProjectionSelector.from_pairs([(0, 1), (1, 2)], 2, 4)
    b = ProjectionSelector.from_pairs([(1, 2), (1, 3)], 2, 4)
    assert set((a | b).pairs()) == {(0, 1), (1, 2), (1, 3)}
    assert (a & b).pairs() == [(1, 2)]
    assert (a - b).pairs() == [(0, 1)]
    assert len(~a) == 6 and not a.isdisjoint(b) and (a - b).isdisjoint(b)
    assert ProjectionSelector.from_pairs([(0, 1), (0, 1)], 2, 4) == ProjectionSelector.from_pairs([(0, 1)], 2, 4)
    with pytest.raises(ValueError):
        ProjectionSelector.from_pairs([(0, 4)], 2, 4)


def test_confidence_map_invariants():
    from nlos_emd.backproject import ConfidenceMap
    with pytest.raises(ValueError):
        ConfidenceMap(GRID, np.zeros(10))
    with pytest.raises(ValueError):
        ConfidenceMap(GRID, -np.ones(GRID.num_voxels))
