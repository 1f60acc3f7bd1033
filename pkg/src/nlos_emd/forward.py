"""Forward transmission: synthesize per-image-point TCSPC histograms.

Every object point p contributes a three-bounce Lambertian weight

    w(p, i) = A * rho * max(0, cos_in) * max(0, cos_out) / (|r2|^2 * |r3|^2)

to the bin holding its total path length for image point i. ``A`` is a
global photon scale; wall cosines are folded into it. Points without
normals use cosine factors of 1.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d

from .scene import SceneDescription, SceneObject, SensorGeometry, TimeAxis, path_lengths

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class PathOutOfRangeError(ValueError):
    """Some object points have flight paths beyond the time axis."""

    def __init__(self, offenders):
        self.offenders = offenders
        head = ", ".join(f"{oid}[{k}] (image {i})" for oid, k, i in offenders[:10])
        more = f" and {len(offenders) - 10} more" if len(offenders) > 10 else ""
        super().__init__(f"{len(offenders)} object points exceed the time axis: {head}{more}")


@dataclass(frozen=True)
class ForwardParams:
    photon_scale: float = 1.0
    broadening_fwhm: float = 0.0
    noise: bool = False
    seed: int = 0
    quantize: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.broadening_fwhm < 0:
            raise ValueError("broadening_fwhm must be >= 0")
        if self.photon_scale <= 0:
            raise ValueError("photon_scale must be > 0")


@dataclass(eq=False)
class HistogramSet:
    """Photon counts N(S, I_i, t_j) as a (num_image_points, num_bins) array."""

    geom: SensorGeometry
    axis: TimeAxis
    counts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.shape != (self.geom.num_image_points, self.axis.num_bins):
            raise ValueError(
                f"counts shape {counts.shape} != ({self.geom.num_image_points}, {self.axis.num_bins})")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ValueError("counts must be finite and >= 0")
        self.counts = counts

    def __add__(self, other: "HistogramSet") -> "HistogramSet":
        if not compatible(self, other):
            raise ValueError("histogram sets differ in geometry or time axis")
        return HistogramSet(self.geom, self.axis, self.counts + other.counts,
                            {"sum_of": [self.digest(), other.digest()]})

    def total(self) -> float:
        return float(self.counts.sum())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.counts).tobytes())
        h.update(np.ascontiguousarray(self.geom.image_points).tobytes())
        h.update(np.array([self.axis.bin_width, self.axis.num_bins, self.geom.r1]).tobytes())
        return h.hexdigest()


def compatible(a: HistogramSet, b: HistogramSet) -> bool:
    return a.axis == b.axis and a.geom.same_as(b.geom)


def point_weights(obj: SceneObject, geom: SensorGeometry, image_index: int,
                  photon_scale: float = 1.0) -> np.ndarray:
    p = obj.points
    d2v = geom.source_point - p
    d3v = geom.image_points[image_index] - p
    d2 = np.sqrt(np.einsum("ij,ij->i", d2v, d2v))
    d3 = np.sqrt(np.einsum("ij,ij->i", d3v, d3v))
    if obj.normals is None:
        cos_in = cos_out = 1.0
    else:
        cos_in = np.maximum(0.0, np.einsum("ij,ij->i", d2v, obj.normals) / d2)
        cos_out = np.maximum(0.0, np.einsum("ij,ij->i", d3v, obj.normals) / d3)
    return photon_scale * obj.reflectivity * cos_in * cos_out / (d2 * d2 * d3 * d3)


def _point_bins(obj: SceneObject, geom: SensorGeometry, axis: TimeAxis, image_index: int):
    return axis.paths_to_bins(path_lengths(geom, image_index, obj.points))


def _row(scene, geom, axis, params, i):
    row = np.zeros(axis.num_bins)
    offenders = []
    for obj in scene.objects:
        bins = _point_bins(obj, geom, axis, i)
        bad = np.flatnonzero(bins < 0)
        if bad.size:
            offenders.extend((obj.id, int(k), i) for k in bad)
            continue
        w = point_weights(obj, geom, i, params.photon_scale)
        if params.quantize:
            w = np.rint(w)
        row += np.bincount(bins, weights=w, minlength=axis.num_bins)
    return row, offenders


def simulate(scene: SceneDescription, geom: SensorGeometry | None, axis: TimeAxis,
             params: ForwardParams = ForwardParams()) -> HistogramSet:
    """Forward-simulate histograms for every image point of ``geom``.

    Raises :class:`PathOutOfRangeError` if any object point's path falls
    beyond the axis; nothing is silently truncated.
    """
    geom = scene.geom if geom is None else geom
    if not scene.objects:
        raise ValueError("scene has no objects")
    idx = range(geom.num_image_points)
    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as ex:
            rows = list(ex.map(lambda i: _row(scene, geom, axis, params, i), idx))
    else:
        rows = [_row(scene, geom, axis, params, i) for i in idx]
    offenders = [o for _, off in rows for o in off]
    if offenders:
        raise PathOutOfRangeError(offenders)
    counts = np.stack([r for r, _ in rows])
    h = HistogramSet(geom, axis, counts, {
        "scene": scene.name,
        "photon_scale": params.photon_scale,
        "quantize": params.quantize,
        "broadening_fwhm": 0.0,
        "noise": False,
        "seed": None,
    })
    if params.broadening_fwhm > 0:
        h = broaden(h, params.broadening_fwhm)
    if params.noise:
        h = apply_noise(h, params.seed)
    return h


def object_support(scene: SceneDescription, geom: SensorGeometry | None, axis: TimeAxis) -> dict:
    """Per object, a boolean (num_image_points, num_bins) mask of bins it feeds."""
    geom = scene.geom if geom is None else geom
    out = {}
    for obj in scene.objects:
        mask = np.zeros((geom.num_image_points, axis.num_bins), dtype=bool)
        for i in range(geom.num_image_points):
            bins = _point_bins(obj, geom, axis, i)
            w = point_weights(obj, geom, i)
            mask[i, bins[(bins >= 0) & (w > 0)]] = True
        out[obj.id] = mask
    return out


def gaussian_kernel(fwhm: float, bin_width: float) -> np.ndarray:
    """Discrete Gaussian sampled at bin offsets, cut at +-4 sigma, sum 1."""
    if not (fwhm > 0):
        raise ValueError(f"fwhm must be > 0, got {fwhm}")
    sigma = fwhm * FWHM_TO_SIGMA / bin_width
    half = int(math.ceil(4.0 * sigma))
    m = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (m / sigma) ** 2)
    return k / k.sum()


def broaden(h: HistogramSet, fwhm: float) -> HistogramSet:
    """Convolve each row with :func:`gaussian_kernel`.

    Edges use half-sample reflection, which keeps row totals for a
    symmetric kernel.
    """
    k = gaussian_kernel(fwhm, h.axis.bin_width)
    if len(k) > h.axis.num_bins:
        raise ValueError("broadening kernel is wider than the time axis")
    counts = convolve1d(h.counts, k, axis=1, mode="reflect")
    np.maximum(counts, 0.0, out=counts)
    meta = dict(h.metadata, broadening_fwhm=fwhm)
    return HistogramSet(h.geom, h.axis, counts, meta)


def apply_noise(h: HistogramSet, seed: int) -> HistogramSet:
    """Replace each bin by a Poisson draw with that mean."""
    rng = np.random.default_rng(seed)
    counts = rng.poisson(h.counts).astype(np.float64)
    return HistogramSet(h.geom, h.axis, counts, dict(h.metadata, noise=True, seed=seed))


def with_counts(h: HistogramSet, counts: np.ndarray) -> HistogramSet:
    return replace(h, counts=counts, metadata=dict(h.metadata))
