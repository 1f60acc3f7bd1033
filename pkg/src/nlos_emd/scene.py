"""Measurement geometry, hidden-scene ground truth and the reconstruction grid.

Conventions
-----------
* SI units throughout (meters, seconds).
* The relay wall is the plane ``z = 0``; hidden objects live at ``z > 0``.
* Voxels are addressed by a linear index ``v = ix + Nx * (iy + Ny * iz)``,
  i.e. arrays reshaped to ``(Nz, Ny, Nx)`` in C order are z-major.
* A voxel belongs to ellipsoid ``(i, j)`` iff the total path through its
  *center* falls in time bin ``j`` (see :meth:`TimeAxis.path_to_bin`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

C_LIGHT = 299792458.0

PLATE_SHAPES = ("round", "triangle", "square", "rect")


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def _as_point(p, name="point") -> np.ndarray:
    a = np.asarray(p, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must have 3 coordinates, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite coordinates: {a}")
    a.setflags(write=False)
    return a


def _as_points(pts, name="points") -> np.ndarray:
    a = np.asarray(pts, dtype=float)
    if a.ndim == 1 and a.size == 3:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be an (n, 3) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Written out so scalar and vectorized paths round identically.
    dx = points[..., 0] - q[0]
    dy = points[..., 1] - q[1]
    dz = points[..., 2] - q[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


@dataclass(frozen=True, eq=False)
class SensorGeometry:
    """Laser, detector, source point S and image points I_i.

    ``r1`` is laser -> S and ``r4[i]`` is I_i -> detector. Use
    :meth:`from_positions` unless the distances were measured separately.
    """

    laser_pos: np.ndarray
    detector_pos: np.ndarray
    source_point: np.ndarray
    image_points: np.ndarray
    r1: float
    r4: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "laser_pos", _as_point(self.laser_pos, "laser_pos"))
        object.__setattr__(self, "detector_pos", _as_point(self.detector_pos, "detector_pos"))
        object.__setattr__(self, "source_point", _as_point(self.source_point, "source_point"))
        pts = _as_points(self.image_points, "image_points")
        if len(pts) == 0:
            raise ValueError("image_points must be non-empty")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("image_points contain duplicates")
        object.__setattr__(self, "image_points", pts)
        r4 = np.asarray(self.r4, dtype=float).reshape(-1)
        if r4.shape != (len(pts),):
            raise ValueError("r4 must have one entry per image point")
        r4 = r4.copy()
        r4.setflags(write=False)
        object.__setattr__(self, "r4", r4)
        object.__setattr__(self, "r1", float(self.r1))

        r1_true = float(_distances(self.laser_pos, self.source_point))
        if abs(self.r1 - r1_true) > 1e-9:
            raise ValueError(f"r1={self.r1} disagrees with |laser - S|={r1_true}")
        r4_true = _distances(pts, self.detector_pos)
        bad = np.flatnonzero(np.abs(r4 - r4_true) > 1e-9)
        if bad.size:
            raise ValueError(f"r4 disagrees with |I_i - detector| at image points {bad.tolist()}")

    @classmethod
    def from_positions(cls, laser_pos, detector_pos, source_point, image_points) -> "SensorGeometry":
        laser = _as_point(laser_pos, "laser_pos")
        det = _as_point(detector_pos, "detector_pos")
        src = _as_point(source_point, "source_point")
        pts = _as_points(image_points, "image_points")
        return cls(laser, det, src, pts,
                   r1=float(_distances(laser, src)),
                   r4=_distances(pts, det))

    @property
    def num_image_points(self) -> int:
        return len(self.image_points)

    def same_as(self, other: "SensorGeometry", atol=1e-9) -> bool:
        return (
            self.num_image_points == other.num_image_points
            and np.allclose(self.image_points, other.image_points, rtol=0, atol=atol)
            and np.allclose(self.source_point, other.source_point, rtol=0, atol=atol)
            and abs(self.r1 - other.r1) <= atol
            and np.allclose(self.r4, other.r4, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class SceneObject:
    """One hidden object as a cloud of reflective surface samples."""

    id: str
    points: np.ndarray
    reflectivity: float
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points, f"object {self.id!r} points")
        if len(pts) == 0:
            raise ValueError(f"object {self.id!r} has no points")
        object.__setattr__(self, "points", pts)
        rho = float(self.reflectivity)
        if not (0.0 < rho <= 1.0):
            raise ValueError(f"object {self.id!r}: reflectivity must be in (0, 1], got {rho}")
        object.__setattr__(self, "reflectivity", rho)
        if self.normals is not None:
            n = _as_points(self.normals, f"object {self.id!r} normals")
            if n.shape != pts.shape:
                raise ValueError(f"object {self.id!r}: normals must match points")
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            if np.any(norm == 0):
                raise ValueError(f"object {self.id!r}: zero-length normal")
            n = n / norm
            n.setflags(write=False)
            object.__setattr__(self, "normals", n)


@dataclass(frozen=True)
class PlateSpec:
    """Flat plate primitive, sampled on a square lattice of ``spacing``.

    ``size`` is the side length (square, triangle), the diameter (round) or
    ``(width, height)`` (rect). The normal should face the wall.
    """

    shape: str
    center: tuple
    normal: tuple
    size: tuple
    reflectivity: float
    spacing: float

    def __post_init__(self):
        if self.shape not in PLATE_SHAPES:
            raise ValueError(f"unknown plate shape {self.shape!r}; expected one of {PLATE_SHAPES}")
        if self.spacing <= 0:
            raise ValueError("plate spacing must be > 0")
        size = tuple(float(s) for s in np.atleast_1d(self.size))
        if self.shape == "rect" and len(size) != 2:
            raise ValueError("rect plates need size = (width, height)")
        if self.shape != "rect" and len(size) != 1:
            raise ValueError(f"{self.shape} plates need a single size value")
        if any(s <= 0 for s in size):
            raise ValueError("plate size must be > 0")
        object.__setattr__(self, "size", size)

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (points, normals) sampled over the plate surface."""
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        # In-plane basis; u stays horizontal when the plate is not flat-on-x.
        ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ref, n)
        u /= np.linalg.norm(u)
        w = np.cross(n, u)

        if self.shape == "rect":
            half = (self.size[0] / 2, self.size[1] / 2)
        else:
            half = (self.size[0] / 2, self.size[0] / 2)
        su = _lattice(half[0], self.spacing)
        sv = _lattice(half[1], self.spacing)
        uu, vv = np.meshgrid(su, sv, indexing="ij")
        uu, vv = uu.ravel(), vv.ravel()
        eps = 1e-12
        if self.shape == "round":
            r = self.size[0] / 2
            keep = uu * uu + vv * vv <= r * r + eps
        elif self.shape == "triangle":
            # Equilateral, centroid at the plate center, apex toward +v.
            s = self.size[0]
            h = s * math.sqrt(3) / 2
            vb = -h / 3
            keep = (vv >= vb - eps) & (vv <= vb + h + eps)
            halfw = (vb + h - vv) / math.sqrt(3)
            keep &= np.abs(uu) <= halfw + eps
        else:
            keep = np.ones_like(uu, dtype=bool)
        uu, vv = uu[keep], vv[keep]
        pts = np.asarray(self.center, float) + uu[:, None] * u + vv[:, None] * w
        normals = np.broadcast_to(n, pts.shape).copy()
        return pts, normals

    def area(self) -> float:
        if self.shape == "round":
            return math.pi * (self.size[0] / 2) ** 2
        if self.shape == "triangle":
            return math.sqrt(3) / 4 * self.size[0] ** 2
        if self.shape == "rect":
            return self.size[0] * self.size[1]
        return self.size[0] ** 2

    def to_object(self, id: str) -> SceneObject:
        pts, normals = self.sample()
        return SceneObject(id=id, points=pts, reflectivity=self.reflectivity, normals=normals)


def _lattice(half: float, spacing: float) -> np.ndarray:
    n = int(math.floor(2 * half / spacing + 1e-9)) + 1
    return (np.arange(n) - (n - 1) / 2) * spacing


@dataclass(frozen=True, eq=False)
class SceneDescription:
    """Sensor geometry plus hidden objects (the ground truth)."""

    geom: SensorGeometry
    objects: tuple
    name: str = "scene"
    plates: dict = field(default_factory=dict)

    def __post_init__(self):
        objs = tuple(self.objects)
        ids = [o.id for o in objs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids: {ids}")
        object.__setattr__(self, "objects", objs)

    def object(self, id: str) -> SceneObject:
        for o in self.objects:
            if o.id == id:
                return o
        raise KeyError(id)


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    origin: np.ndarray
    extent: tuple
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_point(self.origin, "grid origin"))
        extent = tuple(float(e) for e in self.extent)
        dims = tuple(int(d) for d in self.dims)
        if len(extent) != 3 or any(not (e > 0) for e in extent):
            raise ValueError(f"grid extent must be 3 positive lengths, got {extent}")
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be 3 integers >= 1, got {dims}")
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "dims", dims)

    @property
    def pitch(self) -> np.ndarray:
        return np.array([self.extent[a] / self.dims[a] for a in range(3)])

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def ijk_to_index(self, ix, iy, iz):
        nx, ny, nz = self.dims
        ix, iy, iz = np.asarray(ix), np.asarray(iy), np.asarray(iz)
        if np.any((ix < 0) | (ix >= nx) | (iy < 0) | (iy >= ny) | (iz < 0) | (iz >= nz)):
            raise IndexError("voxel ijk out of grid")
        return ix + nx * (iy + ny * iz)

    def index_to_ijk(self, v):
        nx, ny, nz = self.dims
        v = np.asarray(v)
        if np.any((v < 0) | (v >= self.num_voxels)):
            raise IndexError("voxel index out of grid")
        return v % nx, (v // nx) % ny, v // (nx * ny)

    def center(self, v) -> np.ndarray:
        """Center(s) of voxel(s) with linear index ``v``; shape (..., 3)."""
        ix, iy, iz = self.index_to_ijk(v)
        (lx, ly, lz), (nx, ny, nz) = self.extent, self.dims
        return np.stack([
            self.origin[0] + (ix + 0.5) * lx / nx,
            self.origin[1] + (iy + 0.5) * ly / ny,
            self.origin[2] + (iz + 0.5) * lz / nz,
        ], axis=-1)

    def centers(self) -> np.ndarray:
        return self.center(np.arange(self.num_voxels))

    def locate(self, points) -> np.ndarray:
        """Linear index of the voxel containing each point, -1 if outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - self.origin) / self.pitch
        ijk = np.floor(rel).astype(np.int64)
        dims = np.array(self.dims)
        inside = np.all((ijk >= 0) & (ijk < dims), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        i = ijk[inside]
        out[inside] = i[:, 0] + dims[0] * (i[:, 1] + dims[1] * i[:, 2])
        return out

    def same_as(self, other: "VoxelGridSpec") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.extent, other.extent, rtol=0, atol=1e-12)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12))


@dataclass(frozen=True)
class TimeAxis:
    """Uniform TCSPC binning; bin j covers path lengths [j*L, (j+1)*L), L = c*bin_width."""

    bin_width: float
    num_bins: int
    c: float = C_LIGHT

    def __post_init__(self):
        if not (self.bin_width > 0):
            raise ValueError("bin_width must be > 0")
        if int(self.num_bins) < 1:
            raise ValueError("num_bins must be >= 1")
        object.__setattr__(self, "num_bins", int(self.num_bins))
        object.__setattr__(self, "bin_width", float(self.bin_width))

    @property
    def bin_length(self) -> float:
        return self.c * self.bin_width

    def path_to_bin(self, path: float) -> int | None:
        if path < 0:
            raise ValueError(f"path length must be >= 0, got {path}")
        j = math.floor(path / self.bin_length)
        return j if j < self.num_bins else None

    def paths_to_bins(self, paths: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`path_to_bin`; out-of-range entries are -1."""
        paths = np.asarray(paths, dtype=float)
        if np.any(paths < 0):
            raise ValueError("path lengths must be >= 0")
        j = np.floor(paths / self.bin_length)
        return np.where(j < self.num_bins, j, -1).astype(np.int64)


def path_length(geom: SensorGeometry, image_index: int, p) -> float:
    """Total laser -> S -> p -> I_i -> detector path length."""
    if not (0 <= image_index < geom.num_image_points):
        raise IndexError(f"image_index {image_index} out of range [0, {geom.num_image_points})")
    p = np.asarray(p, dtype=float)
    r2 = float(_distances(p, geom.source_point))
    r3 = float(_distances(p, geom.image_points[image_index]))
    return geom.r1 + r2 + r3 + float(geom.r4[image_index])


def path_lengths(geom: SensorGeometry, image_index: int, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`path_length` over an (n, 3) array of points."""
    if not (0 <= image_index < geom.num_image_points):
        raise IndexError(f"image_index {image_index} out of range [0, {geom.num_image_points})")
    r2 = _distances(points, geom.source_point)
    r3 = _distances(points, geom.image_points[image_index])
    return geom.r1 + r2 + r3 + geom.r4[image_index]


# ---------------------------------------------------------------------------
# Fixtures

def wall_grid(center, size, count) -> np.ndarray:
    """Regular lattice of image points on the wall plane z = center[2]."""
    nx, ny = count
    xs = center[0] + (np.arange(nx) - (nx - 1) / 2) * (size[0] / max(nx - 1, 1))
    ys = center[1] + (np.arange(ny) - (ny - 1) / 2) * (size[1] / max(ny - 1, 1))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, center[2])], axis=1)


# Plate placements are fixture parameters, not measured values: strongest
# object nearest the wall, weaker ones progressively deeper. Coordinates
# are at scale 1 and multiplied by the fixture scale.
DESK_PLATES = {
    "square": dict(shape="square", center=(0.12, 0.10, 0.25), size=(0.10,), reflectivity=1.0),
    "triangle": dict(shape="triangle", center=(-0.13, 0.08, 0.375), size=(0.12,), reflectivity=0.3),
    "round": dict(shape="round", center=(0.0, -0.15, 0.51), size=(0.10,), reflectivity=0.1),
}

# ``grid_z0`` is the depth (scale 1) where the voxel grid starts; keeping
# the grid off the relay wall avoids the dense shell crossings near it.
FIXTURE_PARAMS = {
    "paper-sim": dict(scale=2.0, dims=(100, 100, 50), image_count=16, aperture=0.8,
                      num_bins=4024, bin_width=10e-12, spacing=0.01, grid_z0=0.14),
    "desk-sim": dict(scale=1.0, dims=(48, 48, 24), image_count=12, aperture=0.8,
                     num_bins=512, bin_width=70e-12, spacing=0.005, grid_z0=0.14),
}

# Reconstruction settings tuned for the fixtures (h_s at scale 1).
FIXTURE_RECON = dict(h_s=0.08, h_c=0.6, stop_fraction=0.01, beta=0.55,
                     photon_scale=100.0, broadening_fwhm=50e-12)


def fixture_defaults(name: str) -> dict:
    """Decomposition/threshold/forward defaults for a named fixture."""
    if name not in FIXTURE_PARAMS:
        raise ValueError(f"unknown fixture {name!r}; expected one of {tuple(FIXTURE_PARAMS)}")
    out = dict(FIXTURE_RECON)
    out["h_s"] *= FIXTURE_PARAMS[name]["scale"]
    return out


FIXTURES = tuple(FIXTURE_PARAMS)


def make_grid_scene_fixture(name: str, **overrides):
    """Three-plate scene (round/triangle/square) at full or desk scale.

    Returns ``(SceneDescription, VoxelGridSpec, TimeAxis)``. ``paper-sim`` is
    the full 2 m x 2 m x 1 m, 100 x 100 x 50 voxel, 4024 x 10 ps setup with
    16 x 16 image points; ``desk-sim`` is the same scene at half the linear
    size on a 48 x 48 x 24 grid with 12 x 12 image points and 512 x 70 ps
    bins. Keyword overrides replace entries of :data:`FIXTURE_PARAMS`
    (``plates`` replaces :data:`DESK_PLATES` entries by id).
    """
    if name not in FIXTURE_PARAMS:
        raise ValueError(f"unknown fixture {name!r}; expected one of {FIXTURES}")
    cfg = dict(FIXTURE_PARAMS[name])
    plate_cfg = {k: dict(v) for k, v in DESK_PLATES.items()}
    for pid, p in overrides.pop("plates", {}).items():
        plate_cfg.setdefault(pid, {}).update(p)
    unknown = set(overrides) - set(cfg)
    if unknown:
        raise ValueError(f"unknown fixture parameters {sorted(unknown)}")
    cfg.update(overrides)
    scale = cfg["scale"]

    n_img = cfg["image_count"]
    ap = cfg["aperture"] * scale
    image_points = wall_grid((0.0, 0.0, 0.0), (ap, ap), (n_img, n_img))
    geom = SensorGeometry.from_positions(
        laser_pos=(-0.2 * scale, 0.0, 0.15 * scale),
        detector_pos=(-0.2 * scale, 0.05 * scale, 0.15 * scale),
        source_point=(0.0, 0.0, 0.0),
        image_points=image_points,
    )
    plates = {}
    objects = []
    for pid, p in plate_cfg.items():
        plate = PlateSpec(
            shape=p["shape"],
            center=tuple(scale * c for c in p["center"]),
            normal=tuple(p.get("normal", (0.0, 0.0, -1.0))),
            size=tuple(scale * s for s in p["size"]),
            reflectivity=p["reflectivity"],
            spacing=cfg["spacing"],
        )
        plates[pid] = plate
        objects.append(plate.to_object(pid))
    scene = SceneDescription(geom=geom, objects=tuple(objects), name=name, plates=plates)
    grid = VoxelGridSpec(origin=(-0.5 * scale, -0.5 * scale, cfg["grid_z0"] * scale),
                         extent=(1.0 * scale, 1.0 * scale, 0.5 * scale), dims=cfg["dims"])
    axis = TimeAxis(bin_width=cfg["bin_width"], num_bins=cfg["num_bins"])
    return scene, grid, axis
