"""Command-line pipeline: fixture, simulate, backproject, reconstruct, slice, evaluate.

Stages talk only through files, so each one can be rerun on its own.
Every command writes ``<command>.prov.json`` next to its outputs with the
config hash and the sha256 of each input and output file.

Exit codes: 0 ok, 1 ``--require-all`` not met, 2 input error, 3 domain error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from . import formats as F
from .backproject import back_project, build_index
from .emd import DecomposeParams, decompose
from .forward import ForwardParams, PathOutOfRangeError, simulate
from .metrics import score, voxelize_truth
from .recon import empty_reconstruction, reconstruct_emd, reconstruct_general
from .scene import FIXTURES, fixture_defaults, make_grid_scene_fixture

log = logging.getLogger("nlos_emd")

GENERAL_SWEEP = (0.2, 0.25, 0.3, 0.5)
GENERIC_DEFAULTS = dict(h_s=None, h_c=0.4, stop_fraction=0.05, beta=None,
                        photon_scale=1.0, broadening_fwhm=0.0)
# Keys left out of the config hash: they cannot change any output byte.
UNHASHED = ("workers", "out", "verbose", "func")


class InputError(Exception):
    exit_code = 2


class DomainError(Exception):
    exit_code = 3


# -- helpers ---------------------------------------------------------------

def load_scene_arg(arg: str):
    """``arg`` is a fixture name or a scene JSON path. Returns
    ``(scene, grid, axis, defaults)``."""
    if arg in FIXTURES:
        scene, grid, axis = make_grid_scene_fixture(arg)
        return scene, grid, axis, fixture_defaults(arg)
    try:
        scene, grid, axis, extra = F.load_scene_document(arg)
    except F.FormatError as e:
        raise InputError(str(e)) from e
    unknown = set(extra) - set(GENERIC_DEFAULTS)
    if unknown:
        raise InputError(f"scene defaults: unknown keys {sorted(unknown)}")
    return scene, grid, axis, {**GENERIC_DEFAULTS, **extra}


def _input_hash(arg: str) -> str:
    return f"fixture:{arg}" if arg in FIXTURES else F.sha256_file(arg)


def config_hash(config: dict) -> str:
    keep = {k: v for k, v in config.items() if k not in UNHASHED}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()


def write_provenance(out: Path, command: str, config: dict, inputs: dict, outputs: list):
    doc = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in config.items() if k not in UNHASHED},
        "config_hash": config_hash(config),
        "inputs": inputs,
        "outputs": {str(p.relative_to(out)): F.sha256_file(p) for p in sorted(outputs)},
    }
    F.atomic_write(out / f"{command}.prov.json", F.canonical_json(doc))


def _read_hist(path):
    try:
        return F.read_histograms(path)
    except F.FormatError as e:
        raise InputError(str(e)) from e


def _check_pair(h, scene):
    if not h.geom.same_as(scene.geom):
        raise InputError("histogram geometry does not match the scene geometry")


def _beta_name(b: float) -> str:
    return f"beta_{b:.4f}".rstrip("0").rstrip(".")


def _pick(value, default, name):
    v = default if value is None else value
    if v is None:
        raise InputError(f"--{name} is required for this scene (no fixture default)")
    return v


# -- commands --------------------------------------------------------------

def cmd_fixture(args) -> int:
    scene, grid, axis = make_grid_scene_fixture(args.name)
    out = Path(args.out)
    F.save_scene(out, scene, grid, axis, fixture_defaults(args.name))
    print(f"wrote {out}")
    return 0


def cmd_simulate(args) -> int:
    scene, grid, axis, d = load_scene_arg(args.scene)
    fwhm = d["broadening_fwhm"] if args.fwhm_ps is None else args.fwhm_ps * 1e-12
    params = ForwardParams(
        photon_scale=d["photon_scale"] if args.photon_scale is None else args.photon_scale,
        broadening_fwhm=fwhm, noise=args.noise, seed=args.seed, quantize=not args.no_quantize,
        workers=args.workers)
    try:
        h = simulate(scene, None, axis, params)
    except PathOutOfRangeError as e:
        raise DomainError(str(e)) from e
    out = Path(args.out)
    outputs = [F.write_histograms(out / "histograms.nlh", h)]
    if args.csv:
        outputs.append(F.atomic_write(out / "histograms.csv", F.histograms_csv(h)))
    config = dict(vars(args), photon_scale=params.photon_scale, broadening_fwhm=fwhm,
                  quantize=params.quantize)
    write_provenance(out, "simulate", config, {"scene": _input_hash(args.scene)}, outputs)
    print(f"wrote {outputs[0]} ({h.counts.shape[0]} x {h.counts.shape[1]}, total {h.total():.6g})")
    return 0


def cmd_backproject(args) -> int:
    scene, grid, axis, _ = load_scene_arg(args.scene)
    h = _read_hist(args.hist)
    _check_pair(h, scene)
    idx = build_index(h.geom, grid, h.axis, workers=args.workers)
    m = back_project(h, idx, workers=args.workers)
    out = Path(args.out)
    path = F.write_map(out / "confidence.nlm", m)
    write_provenance(out, "backproject", vars(args),
                     {"scene": _input_hash(args.scene), "hist": F.sha256_file(args.hist)}, [path])
    print(f"wrote {path} (total {m.total():.6g})")
    return 0


def _parse_mode_betas(items) -> dict:
    out = {}
    for item in items or []:
        try:
            k, v = item.split("=")
            out[int(k)] = _beta(v)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise InputError(f"--mode-beta expects RANK=BETA, got {item!r}") from e
    return out


def cmd_reconstruct(args) -> int:
    scene, grid, axis, d = load_scene_arg(args.scene)
    h = _read_hist(args.hist)
    _check_pair(h, scene)
    out = Path(args.out)
    idx = build_index(h.geom, grid, h.axis, workers=args.workers)
    outputs = []
    summary = {"method": args.method, "outputs": {}}

    if args.method == "general":
        betas = args.beta or list(GENERAL_SWEEP)
        initial = back_project(h, idx, workers=args.workers)
        outputs.append(F.write_map(out / "confidence.nlm", initial))
        for b in betas:
            r = reconstruct_general(initial, b)
            outputs += _write_recon(out, _beta_name(b), r)
            summary["outputs"][_beta_name(b)] = {"beta": b, "voxels": int(sum(r.counts.values())),
                                                 "status": r.status}
    else:
        betas = args.beta or [_pick(None, d["beta"], "beta")]
        params = DecomposeParams(
            h_s=_pick(args.hs_m, d["h_s"], "hs-m"),
            h_c=_pick(args.hc, d["h_c"], "hc"),
            max_modes=args.max_modes,
            stop_fraction=_pick(args.stop_fraction, d["stop_fraction"], "stop-fraction"))
        dec = decompose(h, idx, params, workers=args.workers)
        outputs.append(F.write_map(out / "confidence.nlm", dec.initial))
        outputs.append(F.write_map(out / "residual.nlm", dec.residual))
        manifest = []
        for mode, rec in zip(dec.modes, dec.history):
            path = F.write_map(out / "modes" / f"mode_{mode.object_rank}.nlm", mode.map)
            outputs.append(path)
            manifest.append({
                "rank": mode.object_rank,
                "map": str(path.relative_to(out)),
                "center_index": rec["center_index"],
                "center_m": grid.center(rec["center_index"]).tolist(),
                "member_count": rec["member_count"],
                "cluster_sum": rec["cluster_sum"],
                "selector_size": rec["selector_size"],
                "residual_fraction": rec["residual_fraction"],
            })
        outputs.append(F.atomic_write(out / "manifest.json", F.canonical_json(
            {"status": dec.status, "params": vars(params), "modes": manifest})))
        mode_betas = _parse_mode_betas(args.mode_beta)
        summary.update(status=dec.status, residual_fractions=[m["residual_fraction"] for m in manifest])
        for b in betas:
            if dec.modes:
                r = reconstruct_emd(dec.modes, b, mode_betas)
            else:
                log.warning("reconstruct: no modes extracted (%s); writing an empty reconstruction",
                            dec.status)
                r = empty_reconstruction(grid)
            outputs += _write_recon(out, _beta_name(b), r)
            summary["outputs"][_beta_name(b)] = {
                "beta": b, "status": r.status,
                "voxels_per_label": {str(k): v for k, v in sorted(r.counts.items())}}

    outputs.append(F.atomic_write(out / "summary.json", F.canonical_json(summary)))
    write_provenance(out, "reconstruct", vars(args),
                     {"scene": _input_hash(args.scene), "hist": F.sha256_file(args.hist)}, outputs)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _write_recon(out: Path, stem: str, r):
    return [F.write_labels(out / f"{stem}.nll", r),
            F.atomic_write(out / f"{stem}.csv", F.labels_csv(r))]


def cmd_slice(args) -> int:
    try:
        m = F.read_map(args.map)
        plane = F.take_slice(m, args.axis, args.index)
    except (F.FormatError, IndexError, ValueError) as e:
        raise InputError(str(e)) from e
    out = Path(args.out)
    stem = f"{Path(args.map).stem}_{args.axis}{args.index}"
    outputs = [F.atomic_write(out / f"{stem}.pgm", F.slice_pgm(plane)),
               F.atomic_write(out / f"{stem}.csv", F.slice_csv(plane))]
    write_provenance(out, "slice", vars(args), {"map": F.sha256_file(args.map)}, outputs)
    print(f"wrote {outputs[0]} and {outputs[1]}")
    return 0


def cmd_evaluate(args) -> int:
    scene, grid, axis, _ = load_scene_arg(args.scene)
    try:
        r = F.read_labels(args.recon)
    except F.FormatError as e:
        raise InputError(str(e)) from e
    if not r.grid.same_as(grid):
        raise InputError("reconstruction grid does not match the scene grid")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        truth = voxelize_truth(scene, grid)
    for w in caught:
        log.warning("%s", w.message)
    scores = score(r, truth, dilation_radius=args.radius)
    header = ["truth_id", "matched_rank", "centroid_error_m", "dilated_iou", "recovered"]
    rows = [[s.truth_id, "" if s.matched_rank is None else s.matched_rank,
             repr(s.centroid_error), repr(s.dilated_iou), str(s.recovered).lower()] for s in scores]
    table = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    text = "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
                     for row in table) + "\n"
    csv_text = "\n".join(",".join(str(c) for c in row) for row in [header] + rows) + "\n"
    out = Path(args.out)
    outputs = [F.atomic_write(out / "scores.txt", text), F.atomic_write(out / "scores.csv", csv_text)]
    write_provenance(out, "evaluate", vars(args),
                     {"scene": _input_hash(args.scene), "recon": F.sha256_file(args.recon)}, outputs)
    sys.stdout.write(text)
    if args.require_all and not all(s.recovered for s in scores):
        log.error("evaluate: %d of %d objects not recovered",
                  sum(not s.recovered for s in scores), len(scores))
        return 1
    return 0


# -- argument parsing -------------------------------------------------------

def _beta(text: str) -> float:
    v = float(text)
    if not (0 < v < 1):
        raise argparse.ArgumentTypeError(f"beta must be in (0, 1), got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlos-emd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene=True):
        if scene:
            sp.add_argument("--scene", required=True,
                            help=f"scene JSON file or fixture name ({', '.join(FIXTURES)})")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=_positive_int, default=1)

    sp = sub.add_parser("fixture", help="write a built-in fixture scene as JSON")
    sp.add_argument("name", choices=FIXTURES)
    sp.add_argument("--out", required=True, help="output scene file")
    sp.set_defaults(func=cmd_fixture)

    sp = sub.add_parser("simulate", help="forward-simulate histograms for a scene")
    common(sp)
    sp.add_argument("--fwhm-ps", type=float, help="Gaussian broadening FWHM in ps")
    sp.add_argument("--photon-scale", type=float)
    sp.add_argument("--noise", action="store_true", help="apply Poisson noise")
    sp.add_argument("--seed", type=int, default=0, help="noise seed")
    sp.add_argument("--no-quantize", action="store_true",
                    help="keep fractional per-point counts instead of rounding them")
    sp.add_argument("--csv", action="store_true", help="also write a CSV export")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("backproject", help="back project histograms into the scene grid")
    common(sp)
    sp.add_argument("--hist", required=True)
    sp.set_defaults(func=cmd_backproject)

    sp = sub.add_parser("reconstruct", help="general or EMD reconstruction with a beta sweep")
    common(sp)
    sp.add_argument("--hist", required=True)
    sp.add_argument("--method", choices=("general", "emd"), default="emd")
    sp.add_argument("--beta", type=_beta, action="append",
                    help="threshold fraction; repeat for a sweep")
    sp.add_argument("--mode-beta", action="append", metavar="RANK=BETA",
                    help="per-mode threshold override (emd)")
    sp.add_argument("--hs-m", type=float, help="cluster window half-size in meters")
    sp.add_argument("--hc", type=float, help="relative intensity drop allowed in a cluster")
    sp.add_argument("--max-modes", type=_positive_int, default=8)
    sp.add_argument("--stop-fraction", type=float)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("slice", help="export one axis-aligned plane as PGM and CSV")
    sp.add_argument("--map", required=True)
    sp.add_argument("--axis", choices=tuple(F.AXES), default="z")
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_slice)

    sp = sub.add_parser("evaluate", help="score a reconstruction against the scene truth")
    common(sp)
    sp.add_argument("--recon", required=True, help="label file (.nll)")
    sp.add_argument("--radius", type=int, default=1, help="truth dilation radius in voxels")
    sp.add_argument("--require-all", action="store_true",
                    help="exit 1 unless every object is recovered")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
