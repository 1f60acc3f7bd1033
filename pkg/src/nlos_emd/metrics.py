"""Reconstruction quality against scene ground truth."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .recon import Reconstruction
from .scene import SceneDescription, VoxelGridSpec


@dataclass
class ObjectScore:
    truth_id: str
    matched_rank: int | None
    centroid_error: float
    dilated_iou: float
    recovered: bool

    def as_dict(self):
        return asdict(self)


def voxelize_truth(scene: SceneDescription, grid: VoxelGridSpec) -> dict:
    """Map each object's sample points to the voxels containing them."""
    out = {}
    for obj in scene.objects:
        idx = grid.locate(obj.points)
        outside = np.flatnonzero(idx < 0)
        if outside.size:
            warnings.warn(f"object {obj.id!r}: {outside.size} points outside the grid "
                          f"(first: {outside[:10].tolist()}); excluded", stacklevel=2)
        out[obj.id] = np.unique(idx[idx >= 0])
    return out


def dilate(grid: VoxelGridSpec, voxels, radius: int) -> np.ndarray:
    """Chebyshev dilation of a voxel set by ``radius`` voxels."""
    voxels = np.asarray(voxels, dtype=np.int64)
    if radius <= 0 or voxels.size == 0:
        return np.unique(voxels)
    mask = np.zeros(grid.num_voxels, dtype=bool)
    mask[voxels] = True
    st = np.ones((2 * radius + 1,) * 3, dtype=bool)
    return np.flatnonzero(binary_dilation(mask.reshape(grid.shape_zyx), structure=st))


def iou(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    union = np.union1d(a, b).size
    return np.intersect1d(a, b).size / union if union else 0.0


def dilated_iou(grid: VoxelGridSpec, a, b, radius: int) -> float:
    """Share of ``a | b`` lying within ``radius`` voxels of the other set.

    Plain IoU at radius 0. Symmetric in its arguments and nondecreasing in
    ``radius``, so a thin truth sheet is not penalized against a
    reconstruction that is one voxel off or one voxel thicker.
    """
    a = np.unique(np.asarray(a, dtype=np.int64))
    b = np.unique(np.asarray(b, dtype=np.int64))
    union = np.union1d(a, b)
    if union.size == 0:
        return 0.0
    near = np.union1d(np.intersect1d(a, dilate(grid, b, radius)),
                      np.intersect1d(b, dilate(grid, a, radius)))
    return near.size / union.size


def centroid(grid: VoxelGridSpec, voxels) -> np.ndarray:
    return grid.center(np.asarray(voxels, dtype=np.int64)).mean(axis=0)


def score(recon: Reconstruction, truth_sets: dict, dilation_radius: int = 1,
          grid: VoxelGridSpec | None = None) -> list:
    """Greedy one-to-one matching of labels to truth objects by :func:`dilated_iou`."""
    if grid is not None and not grid.same_as(recon.grid):
        raise ValueError("reconstruction grid does not match truth grid")
    g = recon.grid
    ids = list(truth_sets)
    labels = sorted(recon.counts)
    label_vox = {k: recon.voxels(k) for k in labels}
    cand = []
    for ti, t in enumerate(ids):
        for k in labels:
            v = dilated_iou(g, label_vox[k], truth_sets[t], dilation_radius)
            if v > 0:
                cand.append((-v, ti, k))
    cand.sort()
    match, used = {}, set()
    for negv, ti, k in cand:
        t = ids[ti]
        if t in match or k in used:
            continue
        match[t] = (k, -negv)
        used.add(k)

    scores = []
    for t in ids:
        if t in match and len(truth_sets[t]):
            k, v = match[t]
            err = float(np.linalg.norm(recon.centroids[k] - centroid(g, truth_sets[t])))
            scores.append(ObjectScore(t, k, err, v, recon.counts[k] > 0 and v > 0))
        else:
            scores.append(ObjectScore(t, None, math.nan, 0.0, False))
    return scores


def footprint_mean(map_values: np.ndarray, voxels) -> float:
    voxels = np.asarray(voxels, dtype=np.int64)
    return float(map_values[voxels].mean()) if voxels.size else 0.0
