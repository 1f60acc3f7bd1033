"""Ellipsoidal back projection into a voxel grid.

The membership predicate (voxel center -> time bin, per image point) is
evaluated once in :func:`build_index` and shared by full and selective
back projection, so both deposit counts on exactly the same shells.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forward import HistogramSet
from .scene import SensorGeometry, TimeAxis, VoxelGridSpec, path_lengths

UNMAPPED = np.iinfo(np.uint32).max

# Image points per accumulation chunk. Fixed, so the floating-point
# summation tree does not depend on the worker count.
CHUNK = 16


@dataclass(eq=False)
class VoxelBinIndex:
    """``bins[i, v]`` is the time bin of voxel v's center for image point i."""

    geom: SensorGeometry
    grid: VoxelGridSpec
    axis: TimeAxis
    bins: np.ndarray

    def __post_init__(self):
        self.bins.setflags(write=False)

    @property
    def num_image_points(self) -> int:
        return self.bins.shape[0]

    def mapped(self, i: int) -> np.ndarray:
        return self.bins[i] != UNMAPPED

    def voxels_of(self, i: int, j: int) -> np.ndarray:
        """Inverse lookup: voxels on ellipsoid (i, j)."""
        return np.flatnonzero(self.bins[i] == j)

    def shell_sizes(self) -> np.ndarray:
        """``(P, B)`` array of voxel counts per ellipsoid shell."""
        nb = self.axis.num_bins
        out = np.zeros((self.num_image_points, nb), dtype=np.int64)
        for i in range(self.num_image_points):
            b = self.bins[i]
            out[i] = np.bincount(b[b != UNMAPPED], minlength=nb)[:nb]
        return out

    def nbytes(self) -> int:
        return self.bins.nbytes


def build_index(geom: SensorGeometry, grid: VoxelGridSpec, axis: TimeAxis,
                workers: int = 1) -> VoxelBinIndex:
    centers = grid.centers()

    def row(i):
        j = axis.paths_to_bins(path_lengths(geom, i, centers))
        out = j.astype(np.uint32)
        out[j < 0] = UNMAPPED
        return out

    idx = range(geom.num_image_points)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(row, idx))
    else:
        rows = [row(i) for i in idx]
    return VoxelBinIndex(geom, grid, axis, np.stack(rows))


class ProjectionSelector:
    """A set of projections (i, j), stored as a dense boolean (P, B) mask."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("selector mask must be 2-D (image points x bins)")

    @classmethod
    def empty(cls, num_image_points: int, num_bins: int) -> "ProjectionSelector":
        return cls(np.zeros((num_image_points, num_bins), dtype=bool))

    @classmethod
    def full(cls, num_image_points: int, num_bins: int) -> "ProjectionSelector":
        return cls(np.ones((num_image_points, num_bins), dtype=bool))

    @classmethod
    def nonzero(cls, h: HistogramSet) -> "ProjectionSelector":
        return cls(h.counts > 0)

    @classmethod
    def from_pairs(cls, pairs, num_image_points: int, num_bins: int) -> "ProjectionSelector":
        sel = cls.empty(num_image_points, num_bins)
        for i, j in pairs:
            if not (0 <= j < num_bins):
                raise ValueError(f"bin {j} out of range")
            sel.mask[i, j] = True
        return sel

    @property
    def shape(self):
        return self.mask.shape

    def bins(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.mask[i])

    def pairs(self):
        return [tuple(p) for p in np.argwhere(self.mask).tolist()]

    def __len__(self):
        return int(self.mask.sum())

    def __or__(self, other):
        return ProjectionSelector(self.mask | other.mask)

    def __and__(self, other):
        return ProjectionSelector(self.mask & other.mask)

    def __sub__(self, other):
        return ProjectionSelector(self.mask & ~other.mask)

    def __invert__(self):
        return ProjectionSelector(~self.mask)

    def __eq__(self, other):
        return isinstance(other, ProjectionSelector) and np.array_equal(self.mask, other.mask)

    def isdisjoint(self, other) -> bool:
        return not np.any(self.mask & other.mask)

    def issubset(self, other) -> bool:
        return not np.any(self.mask & ~other.mask)

    def digest(self) -> str:
        return hashlib.sha256(np.packbits(self.mask).tobytes()).hexdigest()


@dataclass(eq=False)
class ConfidenceMap:
    """Accumulated back-projected intensity, flat in linear voxel order."""

    grid: VoxelGridSpec
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (self.grid.num_voxels,):
            raise ValueError(f"map has {v.size} values, grid has {self.grid.num_voxels} voxels")
        if np.any(v < 0):
            raise ValueError("confidence map values must be >= 0")
        self.values = v

    def volume(self) -> np.ndarray:
        """Values as a (Nz, Ny, Nx) view."""
        return self.values.reshape(self.grid.shape_zyx)

    def total(self) -> float:
        return float(self.values.sum())

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()


def _check(h: HistogramSet, index: VoxelBinIndex):
    if h.axis != index.axis:
        raise ValueError("histogram time axis does not match the index")
    if not h.geom.same_as(index.geom):
        raise ValueError("histogram geometry does not match the index")


def _accumulate(counts: np.ndarray, index: VoxelBinIndex, mask: np.ndarray | None,
                workers: int) -> np.ndarray:
    nimg, nb = counts.shape
    nv = index.grid.num_voxels

    def chunk(start):
        acc = np.zeros(nv)
        for i in range(start, min(start + CHUNK, nimg)):
            row = np.zeros(nb + 1)
            row[:nb] = counts[i] if mask is None else np.where(mask[i], counts[i], 0.0)
            # Sentinel bins gather the trailing zero.
            acc += row[np.minimum(index.bins[i], nb)]
        return acc

    starts = range(0, nimg, CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    total = np.zeros(nv)
    for p in parts:
        total += p
    return total


def back_project(h: HistogramSet, index: VoxelBinIndex, workers: int = 1) -> ConfidenceMap:
    """values[v] = sum_i counts[i, bins[i, v]] over mapped (i, v)."""
    _check(h, index)
    vals = _accumulate(h.counts, index, None, workers)
    return ConfidenceMap(index.grid, vals, {"histograms": h.digest(), "selector": "all"})


def back_project_selected(h: HistogramSet, index: VoxelBinIndex, sel: ProjectionSelector,
                          workers: int = 1) -> ConfidenceMap:
    """Back project only the projections (i, j) contained in ``sel``."""
    _check(h, index)
    if sel.shape != h.counts.shape:
        raise ValueError(f"selector shape {sel.shape} != histogram shape {h.counts.shape}")
    vals = _accumulate(h.counts, index, sel.mask, workers)
    return ConfidenceMap(index.grid, vals, {"histograms": h.digest(), "selector": sel.digest()})


def ellipsoids_through(index: VoxelBinIndex, voxels) -> ProjectionSelector:
    """Every projection (i, j) whose shell contains at least one of ``voxels``."""
    vox = np.asarray(voxels, dtype=np.int64).reshape(-1)
    if vox.size and (vox.min() < 0 or vox.max() >= index.grid.num_voxels):
        raise ValueError("voxel index outside the grid")
    sel = ProjectionSelector.empty(index.num_image_points, index.axis.num_bins)
    if vox.size == 0:
        return sel
    b = index.bins[:, vox]
    rows = np.broadcast_to(np.arange(index.num_image_points)[:, None], b.shape)
    keep = b != UNMAPPED
    sel.mask[rows[keep], b[keep].astype(np.int64)] = True
    return sel
