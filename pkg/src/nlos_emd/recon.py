"""Laplacian filtering, relative thresholding and multi-object composition."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backproject import ConfidenceMap
from .scene import VoxelGridSpec

log = logging.getLogger(__name__)


@dataclass(eq=False)
class FilteredMap:
    grid: VoxelGridSpec
    values: np.ndarray

    def volume(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape_zyx)


@dataclass(eq=False)
class Reconstruction:
    """Label array over the grid: 0 is empty, k > 0 is the object of rank k."""

    grid: VoxelGridSpec
    labels: np.ndarray
    status: str = "ok"
    counts: dict = field(init=False)
    centroids: dict = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16).reshape(-1)
        if self.labels.shape != (self.grid.num_voxels,):
            raise ValueError("label array does not match grid")
        self.counts, self.centroids = {}, {}
        for k in np.unique(self.labels):
            if k == 0:
                continue
            vox = np.flatnonzero(self.labels == k)
            self.counts[int(k)] = int(vox.size)
            self.centroids[int(k)] = self.grid.center(vox).mean(axis=0)

    def voxels(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    @property
    def num_objects(self) -> int:
        return len(self.counts)

    def is_empty(self) -> bool:
        return not self.counts


def laplacian(map) -> FilteredMap:
    """7-point Laplacian with unit spacing and clamped (edge-replicated) borders."""
    grid = map.grid
    if min(grid.dims) < 3:
        raise ValueError(f"laplacian needs >= 3 voxels per axis, grid is {grid.dims}")
    v = np.asarray(map.values, dtype=np.float64).reshape(grid.shape_zyx)
    p = np.pad(v, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]
    # Summing neighbor differences keeps constants exactly at zero.
    out = ((p[:-2, 1:-1, 1:-1] - c) + (p[2:, 1:-1, 1:-1] - c)
           + (p[1:-1, :-2, 1:-1] - c) + (p[1:-1, 2:, 1:-1] - c)
           + (p[1:-1, 1:-1, :-2] - c) + (p[1:-1, 1:-1, 2:] - c))
    return FilteredMap(grid, out.reshape(-1))


def sharpen(map) -> FilteredMap:
    """Negated Laplacian: positive on peaks, which is what thresholding keeps."""
    f = laplacian(map)
    return FilteredMap(f.grid, -f.values)


def threshold(f: FilteredMap, beta: float) -> np.ndarray:
    """Voxels with ``f > beta * max(f)``; empty if ``max(f) <= 0``."""
    if not (0 < beta < 1):
        raise ValueError(f"beta must be in (0, 1), got {beta}")
    top = float(f.values.max()) if f.values.size else 0.0
    if not (top > 0):
        log.warning("threshold: filtered map has no positive values")
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(f.values > beta * top)


def reconstruct_general(map: ConfidenceMap, beta: float) -> Reconstruction:
    labels = np.zeros(map.grid.num_voxels, dtype=np.uint16)
    keep = threshold(sharpen(map), beta)
    labels[keep] = 1
    return Reconstruction(map.grid, labels, "ok" if keep.size else "empty")


def reconstruct_emd(modes: list, beta: float, betas: dict | None = None) -> Reconstruction:
    """Threshold each mode against its own maximum and compose the labels.

    ``betas`` optionally overrides ``beta`` per mode rank. A voxel that
    survives in several modes keeps the lowest rank (the stronger object).
    """
    if not modes:
        raise ValueError("reconstruct_emd needs at least one mode")
    grid = modes[0].map.grid
    labels = np.zeros(grid.num_voxels, dtype=np.uint16)
    for mode in sorted(modes, key=lambda m: m.object_rank):
        b = (betas or {}).get(mode.object_rank, beta)
        keep = threshold(sharpen(mode.map), b)
        keep = keep[labels[keep] == 0]
        labels[keep] = mode.object_rank
    recon = Reconstruction(grid, labels)
    if recon.is_empty():
        log.warning("reconstruct_emd: every mode thresholded to nothing")
        recon.status = "empty"
    return recon


def empty_reconstruction(grid: VoxelGridSpec) -> Reconstruction:
    return Reconstruction(grid, np.zeros(grid.num_voxels, dtype=np.uint16), "empty")
