"""On-disk formats: scene JSON, histogram and map containers, label files,
CSV/PGM exports, and atomic writes.

Binary containers are little-endian. Every header starts with an 8-byte
magic and a uint32 version so readers can reject foreign files early.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .backproject import ConfidenceMap
from .forward import HistogramSet
from .recon import Reconstruction
from .scene import (PLATE_SHAPES, PlateSpec, SceneDescription, SceneObject, SensorGeometry,
                    TimeAxis, VoxelGridSpec)

VERSION = 1
HIST_MAGIC = b"NLOSHIST"
MAP_MAGIC = b"NLOSCMAP"
LABEL_MAGIC = b"NLOSLABL"

_HIST_HEAD = struct.Struct("<8sIIIdd")
_GRID_HEAD = struct.Struct("<8sI3I3d3d")


class FormatError(ValueError):
    """File is unreadable, truncated, or not the expected container."""


# -- atomic output ---------------------------------------------------------

def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _read(path, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {what} {path}: {e.strerror}") from e


# -- unit conversion -------------------------------------------------------

def _to_unit(x, factor: float):
    """``x * factor`` chosen so that dividing by ``factor`` gives back ``x``.

    Prefers the value rounded to 6 decimals, then the raw product, then its
    float neighbors; keeps the raw product if none round-trips.
    """
    shape = np.shape(x)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    raw = x * factor
    out = raw.copy()
    done = raw / factor == x
    for cand in (np.nextafter(raw, np.inf), np.nextafter(raw, -np.inf)):
        ok = ~done & (cand / factor == x)
        out[ok] = cand[ok]
        done |= ok
    snapped = np.round(raw, 6)
    return np.where(snapped / factor == x, snapped, out).reshape(shape)


def _from_unit(x, factor: float):
    return np.asarray(x, dtype=np.float64) / factor


# -- scene JSON ------------------------------------------------------------

def scene_to_dict(scene: SceneDescription, grid: VoxelGridSpec, axis: TimeAxis,
                  defaults: dict | None = None) -> dict:
    """``defaults`` is an optional block of reconstruction settings kept with the scene."""
    g = scene.geom
    objects, plates = [], []
    for obj in scene.objects:
        if obj.id in scene.plates:
            p = scene.plates[obj.id]
            plates.append({"id": obj.id, "shape": p.shape, "center": list(p.center),
                           "normal": list(p.normal), "size": list(p.size),
                           "reflectivity": p.reflectivity, "spacing": p.spacing})
        else:
            o = {"id": obj.id, "reflectivity": obj.reflectivity, "points": obj.points.tolist()}
            if obj.normals is not None:
                o["normals"] = obj.normals.tolist()
            objects.append(o)
    return {
        "format": "nlos-scene",
        "version": VERSION,
        "name": scene.name,
        "geometry": {
            "laser_pos": g.laser_pos.tolist(),
            "detector_pos": g.detector_pos.tolist(),
            "source_point": g.source_point.tolist(),
            "image_points": g.image_points.tolist(),
        },
        "plates": plates,
        "objects": objects,
        "grid": {"origin": list(map(float, grid.origin)), "extent": list(map(float, grid.extent)),
                 "dims": list(map(int, grid.dims))},
        "axis": {"bin_width_s": axis.bin_width, "num_bins": axis.num_bins},
        **({"defaults": dict(defaults)} if defaults else {}),
    }


def scene_from_dict(d: dict):
    """Inverse of :func:`scene_to_dict`; returns ``(scene, grid, axis)``."""
    try:
        if d.get("format") != "nlos-scene":
            raise FormatError("not a scene document (missing format: nlos-scene)")
        geo = d["geometry"]
        geom = SensorGeometry.from_positions(geo["laser_pos"], geo["detector_pos"],
                                             geo["source_point"], geo["image_points"])
        objects, plates = [], {}
        for p in d.get("plates", []):
            if p["shape"] not in PLATE_SHAPES:
                raise FormatError(f"plate {p['id']!r}: unknown shape {p['shape']!r}; "
                                  f"expected one of {PLATE_SHAPES}")
            spec = PlateSpec(shape=p["shape"], center=tuple(p["center"]),
                             normal=tuple(p.get("normal", (0.0, 0.0, -1.0))),
                             size=tuple(p["size"]), reflectivity=p["reflectivity"],
                             spacing=p["spacing"])
            plates[p["id"]] = spec
            objects.append(spec.to_object(p["id"]))
        for o in d.get("objects", []):
            objects.append(SceneObject(o["id"], np.asarray(o["points"], dtype=float),
                                       o["reflectivity"],
                                       None if "normals" not in o else np.asarray(o["normals"])))
        gr = d["grid"]
        grid = VoxelGridSpec(origin=tuple(gr["origin"]), extent=tuple(gr["extent"]),
                             dims=tuple(gr["dims"]))
        axis = TimeAxis(bin_width=d["axis"]["bin_width_s"], num_bins=d["axis"]["num_bins"])
    except KeyError as e:
        raise FormatError(f"scene document is missing key {e.args[0]!r}") from e
    except FormatError:
        raise
    except (TypeError, ValueError) as e:
        raise FormatError(f"invalid scene document: {e}") from e
    scene = SceneDescription(geom=geom, objects=tuple(objects), name=d.get("name", "scene"),
                             plates=plates)
    return scene, grid, axis


def save_scene(path, scene, grid, axis, defaults: dict | None = None) -> Path:
    return atomic_write(path, canonical_json(scene_to_dict(scene, grid, axis, defaults)))


def load_scene_document(path):
    """``(scene, grid, axis, defaults)``; ``defaults`` is ``{}`` when absent."""
    raw = _read(path, "scene file")
    try:
        d = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"scene file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise FormatError(f"scene file {path} must hold a JSON object")
    defaults = d.get("defaults", {})
    if not isinstance(defaults, dict):
        raise FormatError(f"scene file {path}: 'defaults' must be an object")
    return (*scene_from_dict(d), defaults)


def load_scene(path):
    return load_scene_document(path)[:3]


# -- histograms ------------------------------------------------------------

def histograms_to_bytes(h: HistogramSet) -> bytes:
    g = h.geom
    p, b = h.counts.shape
    buf = io.BytesIO()
    buf.write(_HIST_HEAD.pack(HIST_MAGIC, VERSION, p, b,
                              float(_to_unit(h.axis.bin_width, 1e12)), float(_to_unit(g.r1, 1e3))))
    pos = np.concatenate([g.laser_pos, g.detector_pos, g.source_point])
    buf.write(_to_unit(pos, 1e3).astype("<f8").tobytes())
    buf.write(_to_unit(g.r4, 1e3).astype("<f8").tobytes())
    buf.write(_to_unit(g.image_points, 1e3).astype("<f8").tobytes())
    buf.write(np.ascontiguousarray(h.counts, dtype="<f8").tobytes())
    return buf.getvalue()


def histograms_from_bytes(data: bytes, source="<bytes>") -> HistogramSet:
    if len(data) < _HIST_HEAD.size:
        raise FormatError(f"{source}: truncated histogram header")
    magic, version, p, b, bw_ps, r1_mm = _HIST_HEAD.unpack_from(data)
    if magic != HIST_MAGIC:
        raise FormatError(f"{source}: not a histogram file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported histogram version {version}")
    n = 9 + p + 3 * p + p * b
    need = _HIST_HEAD.size + 8 * n
    if len(data) != need:
        raise FormatError(f"{source}: expected {need} bytes for {p}x{b} histograms, got {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HIST_HEAD.size, count=n).astype(np.float64)
    pos = _from_unit(body[:9], 1e3)
    r4 = _from_unit(body[9:9 + p], 1e3)
    pts = _from_unit(body[9 + p:9 + 4 * p].reshape(p, 3), 1e3)
    counts = body[9 + 4 * p:].reshape(p, b).copy()
    try:
        geom = SensorGeometry(pos[0:3], pos[3:6], pos[6:9], pts,
                              r1=float(_from_unit(r1_mm, 1e3)), r4=r4)
        axis = TimeAxis(bin_width=float(_from_unit(bw_ps, 1e12)), num_bins=b)
        return HistogramSet(geom, axis, counts)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from e


def write_histograms(path, h: HistogramSet) -> Path:
    return atomic_write(path, histograms_to_bytes(h))


def read_histograms(path) -> HistogramSet:
    return histograms_from_bytes(_read(path, "histogram file"), str(path))


def histograms_csv(h: HistogramSet) -> str:
    """One row per image point: index, position (mm), r4 (mm), then counts."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    b = h.axis.num_bins
    w.writerow(["image_index", "x_mm", "y_mm", "z_mm", "r4_mm"] + [f"bin_{j}" for j in range(b)])
    pts = _to_unit(h.geom.image_points, 1e3)
    r4 = _to_unit(h.geom.r4, 1e3)
    for i in range(h.counts.shape[0]):
        w.writerow([i, *map(repr, pts[i].tolist()), repr(float(r4[i])),
                    *map(repr, h.counts[i].tolist())])
    return out.getvalue()


# -- grid containers (maps and labels) -------------------------------------

def _grid_header(magic: bytes, grid: VoxelGridSpec) -> bytes:
    return _GRID_HEAD.pack(magic, VERSION, *map(int, grid.dims),
                           *map(float, grid.origin), *map(float, grid.extent))


def _parse_grid_header(data: bytes, magic: bytes, source, what):
    if len(data) < _GRID_HEAD.size:
        raise FormatError(f"{source}: truncated {what} header")
    f = _GRID_HEAD.unpack_from(data)
    if f[0] != magic:
        raise FormatError(f"{source}: not a {what} file (magic {f[0]!r})")
    if f[1] != VERSION:
        raise FormatError(f"{source}: unsupported {what} version {f[1]}")
    try:
        grid = VoxelGridSpec(origin=f[5:8], extent=f[8:11], dims=f[2:5])
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from e
    return grid, _GRID_HEAD.size


def map_to_bytes(m: ConfidenceMap, unit: str = "counts") -> bytes:
    """Grid header, 8-byte unit tag, sha256 of the provenance JSON, the
    provenance JSON itself (length-prefixed), then z-major float64 values."""
    prov = json.dumps(m.provenance, sort_keys=True).encode()
    tag = unit.encode()[:8].ljust(8, b"\0")
    return b"".join([
        _grid_header(MAP_MAGIC, m.grid), tag, hashlib.sha256(prov).digest(),
        struct.pack("<I", len(prov)), prov,
        np.ascontiguousarray(m.values, dtype="<f8").tobytes(),
    ])


def map_from_bytes(data: bytes, source="<bytes>") -> ConfidenceMap:
    grid, off = _parse_grid_header(data, MAP_MAGIC, source, "confidence-map")
    if len(data) < off + 44:
        raise FormatError(f"{source}: truncated confidence-map header")
    digest = data[off + 8:off + 40]
    (plen,) = struct.unpack_from("<I", data, off + 40)
    off += 44
    prov = data[off:off + plen]
    if hashlib.sha256(prov).digest() != digest:
        raise FormatError(f"{source}: provenance hash mismatch")
    off += plen
    need = off + 8 * grid.num_voxels
    if len(data) != need:
        raise FormatError(f"{source}: expected {need} bytes, got {len(data)}")
    vals = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    try:
        return ConfidenceMap(grid, vals, json.loads(prov))
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from e


def write_map(path, m: ConfidenceMap) -> Path:
    return atomic_write(path, map_to_bytes(m))


def read_map(path) -> ConfidenceMap:
    return map_from_bytes(_read(path, "confidence-map file"), str(path))


def labels_to_bytes(r: Reconstruction) -> bytes:
    return _grid_header(LABEL_MAGIC, r.grid) + r.labels.astype("<u2").tobytes()


def labels_from_bytes(data: bytes, source="<bytes>") -> Reconstruction:
    grid, off = _parse_grid_header(data, LABEL_MAGIC, source, "label")
    if len(data) != off + 2 * grid.num_voxels:
        raise FormatError(f"{source}: label array does not match grid {grid.dims}")
    labels = np.frombuffer(data, dtype="<u2", offset=off).astype(np.uint16)
    return Reconstruction(grid, labels, "ok" if labels.any() else "empty")


def write_labels(path, r: Reconstruction) -> Path:
    return atomic_write(path, labels_to_bytes(r))


def read_labels(path) -> Reconstruction:
    return labels_from_bytes(_read(path, "label file"), str(path))


def labels_csv(r: Reconstruction) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["x_m", "y_m", "z_m", "label"])
    vox = np.flatnonzero(r.labels)
    for v, c in zip(vox.tolist(), r.grid.center(vox).tolist() if vox.size else []):
        w.writerow([*map(repr, c), int(r.labels[v])])
    return out.getvalue()


# -- slices ----------------------------------------------------------------

AXES = {"x": 2, "y": 1, "z": 0}


def take_slice(m: ConfidenceMap, axis: str, index: int) -> np.ndarray:
    """2-D plane of the (z, y, x) volume; rows run along the slower axis."""
    if axis not in AXES:
        raise ValueError(f"slice axis must be one of x, y, z; got {axis!r}")
    vol = m.volume()
    n = vol.shape[AXES[axis]]
    if not (0 <= index < n):
        raise IndexError(f"slice index {index} out of range [0, {n}) along {axis}")
    return np.take(vol, index, axis=AXES[axis])


def slice_csv(plane: np.ndarray) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    for row in plane.tolist():
        w.writerow(list(map(repr, row)))
    return out.getvalue()


def read_slice_csv(text: str) -> np.ndarray:
    return np.array([[float(x) for x in row] for row in csv.reader(io.StringIO(text)) if row])


def slice_pgm(plane: np.ndarray) -> bytes:
    """Binary PGM (P5), 8-bit, min-max normalized; a flat plane is mid-gray."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        px = np.rint(255.0 * (plane - lo) / (hi - lo))
    else:
        px = np.full(plane.shape, 128.0)
    rows, cols = plane.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + px.astype(np.uint8).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError("not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)
