"""Ellipsoid mode decomposition.

Each iteration clusters the current confidence map around windowed local
maxima, takes the cluster with the largest summed intensity, re-projects
only the ellipsoids passing through that cluster (the object's *mode*),
and removes those projections from the map. Projections claimed by one
mode are never handed to a later one.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .backproject import (ConfidenceMap, ProjectionSelector, VoxelBinIndex, back_project,
                          back_project_selected, ellipsoids_through)
from .forward import HistogramSet
from .scene import VoxelGridSpec

log = logging.getLogger(__name__)


class NoClusters(Exception):
    """Raised by :func:`select_strongest` when nothing is left to extract."""


@dataclass(frozen=True)
class DecomposeParams:
    h_s: float
    h_c: float = 0.4
    max_modes: int = 8
    stop_fraction: float = 0.05

    def __post_init__(self):
        if not (self.h_s > 0):
            raise ValueError("h_s must be > 0")
        if not (0 < self.h_c <= 1):
            raise ValueError("h_c must be in (0, 1]")
        if int(self.max_modes) < 1:
            raise ValueError("max_modes must be >= 1")
        if not (0 < self.stop_fraction < 1):
            raise ValueError("stop_fraction must be in (0, 1)")


@dataclass(eq=False)
class Cluster:
    center: int
    members: np.ndarray
    sum: float
    center_value: float = 0.0


@dataclass(eq=False)
class EllipsoidMode:
    object_rank: int
    selector: ProjectionSelector
    map: ConfidenceMap
    seed_cluster: Cluster


@dataclass(eq=False)
class Decomposition:
    modes: list
    residual: ConfidenceMap
    initial: ConfidenceMap
    history: list = field(default_factory=list)
    status: str = ""

    def __iter__(self):
        # Allows ``modes, residual = decompose(...)``.
        yield self.modes
        yield self.residual


def window_radii(grid: VoxelGridSpec, h_s: float) -> tuple:
    """Spatial window half-widths in voxels, (rx, ry, rz)."""
    return tuple(int(math.ceil(h_s / p - 1e-9)) for p in grid.pitch)


def _window(shape_zyx, zyx, radii_zyx):
    return tuple(slice(max(0, c - r), min(n, c + r + 1))
                 for c, r, n in zip(zyx, radii_zyx, shape_zyx))


def _linear(grid: VoxelGridSpec, sl) -> np.ndarray:
    nz, ny, nx = grid.shape_zyx
    z = np.arange(sl[0].start, sl[0].stop)
    y = np.arange(sl[1].start, sl[1].stop)
    x = np.arange(sl[2].start, sl[2].stop)
    return (x[None, None, :] + nx * (y[None, :, None] + ny * z[:, None, None]))


def _candidates(vol: np.ndarray, radii_zyx) -> np.ndarray:
    size = tuple(2 * r + 1 for r in radii_zyx)
    peak = maximum_filter(vol, size=size, mode="nearest")
    return np.flatnonzero(((vol == peak) & (vol > 0)).ravel())


def _cluster_at(map: ConfidenceMap, radii_zyx, h_c: float, v: int, members: bool):
    vol = map.volume()
    nx, ny = map.grid.dims[0], map.grid.dims[1]
    zyx = (v // (nx * ny), (v // nx) % ny, v % nx)
    sl = _window(vol.shape, zyx, radii_zyx)
    w = vol[sl]
    v0 = vol[zyx]
    keep = ((v0 - w) / v0 <= h_c) & (w <= v0)
    s = math.fsum(w[keep].tolist())
    mem = np.sort(_linear(map.grid, sl)[keep]) if members else None
    return Cluster(center=int(v), members=mem, sum=s, center_value=float(v0))


def _scan(map: ConfidenceMap, params: DecomposeParams, members: bool, workers: int):
    rx, ry, rz = window_radii(map.grid, params.h_s)
    radii = (rz, ry, rx)
    cands = _candidates(map.volume(), radii)

    def run(vs):
        return [_cluster_at(map, radii, params.h_c, int(v), members) for v in vs]

    if workers > 1 and len(cands) > 1:
        parts = np.array_split(cands, workers)
        with ThreadPoolExecutor(workers) as ex:
            out = [c for part in ex.map(run, parts) for c in part]
    else:
        out = run(cands)
    out.sort(key=lambda c: (-c.sum, c.center))
    return out


def find_clusters(map: ConfidenceMap, params: DecomposeParams, workers: int = 1) -> list:
    """All clusters of ``map``, by descending sum then lowest center index.

    A center is any positive voxel that is a (tie-inclusive) maximum of its
    axis-aligned window; its members are the window voxels whose relative
    drop from the center value is at most ``h_c``.
    """
    return _scan(map, params, True, workers)


def select_strongest(clusters: list) -> Cluster:
    if not clusters:
        raise NoClusters("no clusters left")
    return min(clusters, key=lambda c: (-c.sum, c.center))


def strongest_cluster(map: ConfidenceMap, params: DecomposeParams, workers: int = 1) -> Cluster:
    """Same result as ``select_strongest(find_clusters(...))`` but only the
    winner's member list is materialized."""
    best = select_strongest(_scan(map, params, False, workers))
    rx, ry, rz = window_radii(map.grid, params.h_s)
    return _cluster_at(map, (rz, ry, rx), params.h_c, best.center, True)


def extract_mode(h: HistogramSet, index: VoxelBinIndex, map: ConfidenceMap, cluster: Cluster,
                 claimed: ProjectionSelector | None = None, rank: int = 1, workers: int = 1):
    """Re-project the ellipsoids through ``cluster`` and split them off ``map``.

    ``claimed`` holds projections taken by earlier modes; ``map`` must be
    the back projection of everything else. Returns ``(mode, residual)``.
    The residual is the back projection of the projections still
    unclaimed afterwards, so it is nonnegative by construction and equals
    ``map - mode.map`` (exactly, for integer counts).
    """
    if cluster.members is None or len(cluster.members) == 0:
        raise ValueError("cannot extract a mode from an empty cluster")
    if claimed is None:
        claimed = ProjectionSelector.empty(*h.counts.shape)
    sel = ellipsoids_through(index, cluster.members) - claimed
    mode_map = back_project_selected(h, index, sel, workers)
    residual = back_project_selected(h, index, ~(claimed | sel), workers)
    if residual.values.shape != map.values.shape:
        raise ValueError("map does not match the index grid")
    return EllipsoidMode(rank, sel, mode_map, cluster), residual


def decompose(h: HistogramSet, index: VoxelBinIndex, params: DecomposeParams,
              workers: int = 1) -> Decomposition:
    initial = back_project(h, index, workers)
    total0 = initial.total()
    if total0 == 0:
        log.warning("decompose: confidence map is empty")
        return Decomposition([], initial, initial, [], "empty")

    claimed = ProjectionSelector.empty(*h.counts.shape)
    current = initial
    modes, history = [], []
    status = "max_modes"
    while len(modes) < params.max_modes:
        try:
            cluster = strongest_cluster(current, params, workers)
        except NoClusters:
            status = "no_clusters"
            break
        mode, residual = extract_mode(h, index, current, cluster, claimed,
                                      rank=len(modes) + 1, workers=workers)
        if np.any(residual.values < 0):
            raise AssertionError("residual went negative")
        if not mode.selector.isdisjoint(claimed):
            raise AssertionError("mode re-claimed a projection")
        if residual.total() >= current.total():
            status = "no_progress"
            log.warning("decompose: no progress at mode %d, stopping", len(modes) + 1)
            break
        claimed = claimed | mode.selector
        modes.append(mode)
        frac = residual.total() / total0
        history.append({
            "rank": mode.object_rank,
            "center_index": cluster.center,
            "cluster_sum": cluster.sum,
            "member_count": int(len(cluster.members)),
            "selector_size": len(mode.selector),
            "residual_fraction": frac,
        })
        log.info("mode %d: center %d, %d members, %d projections, residual %.4f",
                 mode.object_rank, cluster.center, len(cluster.members), len(mode.selector), frac)
        current = residual
        if frac < params.stop_fraction:
            status = "stop_fraction"
            break
    return Decomposition(modes, current, initial, history, status)
