"""``warpfib`` command line: phantom generation, fibers, training, evaluation.

Commands only communicate through files in their ``--out`` directory. Each
run ends by atomically writing ``manifest.json`` (config, seeds, input and
output hashes, timings, versions).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, DataError, NumericalFailure
from .evaluation import (LandmarkSet, displacement_mse, export_surface_vtk, ff_sweep,
                         fiber_stretch_stats, mid_slice, read_landmarks, strain_curves,
                         track_landmarks, warp_volume, write_csv, write_fiber_stats, write_sweep)
from .fibers import (FiberField, HelixAngleSpec, ldrb_fibers, phantom_fiber_field, read_fibers,
                     write_fibers, write_fibers_vtk)
from .mesh import MeshError, annulus_mesh, box_mesh, extract_surface, read_mesh, write_mesh
from .network import load_checkpoint, save_checkpoint
from .phantom import AnalyticField, PhantomPair, PhantomSpec, synthesize_pair
from .training import (PRESETS, TrainConfig, deterministic_metrics, load_config, phantom_problem,
                       save_config, sequence_problem, train, write_metrics)
from .volume import VolumeFormatError, read_sequence, read_volume, write_volume

log = logging.getLogger("warpfib")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


# ------------------------------------------------------------------ manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Collects what a command read and wrote; saved atomically at the end."""

    def __init__(self, command, argv, out: Path, deterministic: bool, threads):
        self.out = out
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "deterministic": deterministic,
            "threads": threads,
            "config": {},
            "seeds": {},
            "inputs": {},
            "outputs": {},
            "timings": {},
        }
        self._t0 = time.perf_counter()

    def add_input(self, path):
        path = Path(path)
        self.data["inputs"][str(path)] = sha256_file(path)
        raw = _raw_companion(path)
        if raw is not None:
            self.data["inputs"][str(raw)] = sha256_file(raw)

    def add_output(self, path):
        path = Path(path)
        self.data["outputs"][os.path.relpath(path, self.out)] = sha256_file(path)
        raw = _raw_companion(path)
        if raw is not None:
            self.data["outputs"][os.path.relpath(raw, self.out)] = sha256_file(raw)

    def write(self) -> Path:
        self.data["timings"].setdefault("total_seconds", time.perf_counter() - self._t0)
        path = self.out / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, default=_json_default) + "\n")
        os.replace(tmp, path)
        return path


def _raw_companion(path: Path):
    """Binary file referenced by a JSON header (volumes and checkpoints)."""
    if not path.name.endswith(".json"):
        return None
    try:
        obj = json.loads(path.read_text())
    except (OSError, ValueError):
        return None
    if isinstance(obj, dict) and isinstance(obj.get("raw"), str):
        raw = path.with_name(obj["raw"])
        return raw if raw.exists() else None
    return None


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# ------------------------------------------------------------------ data helpers


PHANTOM_KIND = "warpfib-phantom"


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(spec).items()}


def spec_from_dict(obj) -> PhantomSpec:
    fields = {f.name for f in dataclasses.fields(PhantomSpec)}
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items() if k in fields}
    return PhantomSpec(**kw)


def load_phantom(path) -> PhantomPair:
    path = Path(path)
    obj = _read_json(path, DataError)
    if obj.get("kind") != PHANTOM_KIND:
        raise DataError(f"{path} is not a phantom descriptor")
    spec = spec_from_dict(obj["spec"])
    ref = read_volume(path.with_name(obj["reference"]))
    tmpl = read_volume(path.with_name(obj["template"]))
    return PhantomPair(spec, ref, tmpl)


def _read_json(path, err=DataError):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise err(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise err(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _is_phantom(path) -> bool:
    try:
        return json.loads(Path(path).read_text()).get("kind") == PHANTOM_KIND
    except (OSError, ValueError, AttributeError):
        return False


def _field_from_checkpoint(path, analytic=None):
    if analytic is not None:
        return analytic
    return load_checkpoint(path)


# ------------------------------------------------------------------ commands


def cmd_phantom(args, man: RunManifest):
    spec = PhantomSpec(twist=args.twist)
    dims = tuple(args.dims) if args.dims else spec.dims
    try:
        pair = synthesize_pair(spec, dims=dims, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    man.data["seeds"]["noise"] = args.seed
    man.data["config"] = {"dims": list(dims), "spec": spec_to_dict(spec)}
    out = man.out
    ref = write_volume(pair.reference, out / "reference.vol.json")
    tmpl = write_volume(pair.template, out / "template.vol.json")
    pts = pair.object_points()
    gt = pair.ground_truth().displacement(spec.template_time, pts)
    gt_path = out / "ground_truth.json"
    gt_path.write_text(json.dumps({"t": spec.template_time, "points": pts.tolist(),
                                   "displacement": gt.tolist()}) + "\n")
    fib = write_fibers(phantom_fiber_field(spec, pts), out / "fibers.json")
    desc = out / "phantom.json"
    desc.write_text(json.dumps({"kind": PHANTOM_KIND, "spec": spec_to_dict(spec),
                                "dims": list(dims), "seed": args.seed,
                                "reference": ref.name, "template": tmpl.name,
                                "ground_truth": gt_path.name, "fibers": fib.name}, indent=1) + "\n")
    for p in (ref, tmpl, gt_path, fib, desc):
        man.add_output(p)


def cmd_mesh(args, man: RunManifest):
    if args.kind == "annulus":
        mesh = annulus_mesh(args.r_in, args.r_out, args.z0, args.z1, n_r=args.n[0],
                            n_theta=args.n[1], n_z=args.n[2])
    else:
        mesh = box_mesh(args.lo, args.hi, args.n)
    man.data["config"] = vars(args).copy()
    man.add_output(write_mesh(mesh, man.out / "mesh.json"))


def cmd_fibers(args, man: RunManifest):
    mesh = read_mesh(args.mesh)
    man.add_input(args.mesh)
    try:
        spec = HelixAngleSpec.symmetric(args.alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    man.data["config"] = {"alpha": args.alpha, "base_threshold": args.base_threshold}
    field = ldrb_fibers(mesh, spec, base_threshold=args.base_threshold)
    if field.flagged.any():
        log.warning("%d nodes had degenerate gradients and copied a neighbor frame",
                    field.flagged.sum())
    man.add_output(write_fibers(field, man.out / "fibers.json"))
    man.add_output(write_fibers_vtk(field, man.out / "fibers.vtk", mesh))


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.epochs is not None:
        changes["epochs_baseline"], changes["epochs_fiber"] = args.epochs
    changes["deterministic"] = args.deterministic
    changes["threads"] = args.threads
    return cfg.replace(**changes)


def cmd_train(args, man: RunManifest):
    cfg = _train_config(args)
    if args.config:
        man.add_input(args.config)
    man.add_input(args.data)
    if _is_phantom(args.data):
        pair = load_phantom(args.data)
        problem = phantom_problem(pair)
    else:
        if not args.mesh:
            raise ConfigError("--mesh is required for image sequences")
        seq = read_sequence(args.data)
        mesh = read_mesh(args.mesh)
        man.add_input(args.mesh)
        if args.fibers:
            fibers = read_fibers(args.fibers)
            man.add_input(args.fibers)
        elif args.mode == "fibers":
            fibers = ldrb_fibers(mesh, HelixAngleSpec.symmetric(cfg.alpha))
        else:
            fibers = None
        if fibers is not None and not cfg.exclude_base:
            fibers = FiberField(fibers.points, fibers.fibers, np.zeros(len(fibers.points), bool))
        problem = sequence_problem(seq, mesh, fibers, cfg.exclude_base)
    man.data["config"] = cfg.to_dict()
    man.data["config"]["mode"] = args.mode
    man.data["seeds"]["train"] = cfg.seed
    save_config(cfg, man.out / "config.json")
    man.add_output(man.out / "config.json")
    result = train(cfg, problem, mode=args.mode, snapshot_dir=man.out)
    ckpt = save_checkpoint(result.net, man.out / "checkpoint.ckpt.json",
                           extra={"mode": args.mode, "seed": cfg.seed})
    rows = deterministic_metrics(result.metrics, cfg.deterministic)
    metrics = write_metrics(rows, man.out / "metrics.csv")
    man.data["timings"]["epoch_seconds"] = [r["seconds"] for r in result.metrics]
    man.data["timings"].update(result.timings)
    man.data["pretrain"] = dataclasses.asdict(result.pretrain)
    man.add_output(ckpt)
    man.add_output(metrics)


def _times(args, default=None):
    if args.times:
        t = np.asarray(args.times, dtype=np.float64)
    elif args.data and not _is_phantom(args.data):
        t = np.asarray(read_sequence(args.data).times[1:], dtype=np.float64)
    elif default is not None:
        t = np.asarray(default, dtype=np.float64)
    else:
        raise ConfigError("frame times needed: give --times or a sequence via --data")
    if np.any((t < 0) | (t > 1)):
        raise ConfigError("frame times must lie in [0, 1]")
    return t


def cmd_eval(args, man: RunManifest):
    pair = None
    if args.data:
        man.add_input(args.data)
        if _is_phantom(args.data):
            pair = load_phantom(args.data)
    analytic = None
    if args.checkpoint == "analytic":
        if pair is None:
            raise ConfigError("the analytic field needs a phantom descriptor via --data")
        analytic = pair.ground_truth()
    else:
        man.add_input(args.checkpoint)
    field = _field_from_checkpoint(args.checkpoint, analytic)
    out = man.out
    man.data["config"] = {"task": args.task}

    if args.task == "mse":
        if pair is None:
            raise ConfigError("--task mse needs a phantom descriptor via --data")
        mse = displacement_mse(field, pair.ground_truth(), pair.object_points(),
                               pair.spec.template_time)
        man.add_output(write_csv(out / "mse.csv", ("mse",), [(mse,)]))
        print(f"mse {mse:.6e}")
    elif args.task == "landmarks":
        if not args.landmarks:
            raise ConfigError("--task landmarks needs --landmarks")
        lms = read_landmarks(args.landmarks)
        man.add_input(args.landmarks)
        report = track_landmarks(field, lms)
        man.add_output(report.write_csv(out / "landmarks.csv"))
        frames = list(lms.positions)
        summary = [(f, report.median(f), len(report.errors(f))) for f in frames]
        man.add_output(write_csv(out / "landmarks_summary.csv", ("frame", "median_error", "n"),
                                 summary))
        for f, med, n in summary:
            print(f"{f}: median error {med:.4f} mm over {n} landmarks")
    elif args.task == "strain":
        if not args.mesh:
            raise ConfigError("--task strain needs --mesh")
        mesh = read_mesh(args.mesh)
        man.add_input(args.mesh)
        surf = extract_surface(mesh, args.surfaces)
        times = _times(args, default=[0.0, pair.spec.template_time] if pair else None)
        curves = strain_curves(field, surf, times)
        man.add_output(curves.write_csv(out / "strain.csv"))
        if args.vtk:
            for k, t in enumerate(times):
                man.add_output(export_surface_vtk(field, surf, t, out / f"surface_{k:03d}.vtk"))
    elif args.task == "fiberstretch":
        if args.fibers:
            fib = read_fibers(args.fibers)
            man.add_input(args.fibers)
        elif pair is not None:
            fib = phantom_fiber_field(pair.spec, pair.object_points())
        else:
            raise ConfigError("--task fiberstretch needs --fibers or a phantom descriptor")
        pts, dirs = fib.active()
        times = _times(args, default=[pair.spec.template_time] if pair else None)
        rows = fiber_stretch_stats(field, pts, dirs, times)
        man.add_output(write_fiber_stats(rows, out / "fiber_stretch.csv"))


def cmd_warp(args, man: RunManifest):
    if not 0.0 <= args.frame <= 1.0:
        raise ConfigError(f"--frame must lie in [0, 1], got {args.frame}")
    tmpl = read_volume(args.template)
    man.add_input(args.template)
    grid = tmpl
    if args.reference:
        grid = read_volume(args.reference)
        man.add_input(args.reference)
    if args.checkpoint == "analytic":
        if not args.data:
            raise ConfigError("the analytic field needs a phantom descriptor via --data")
        field = load_phantom(args.data).ground_truth()
    else:
        field = load_checkpoint(args.checkpoint)
        man.add_input(args.checkpoint)
    warped = warp_volume(field, tmpl, grid, args.frame)
    man.add_output(write_volume(warped, man.out / "warped.vol.json"))
    if args.mid_slice:
        sl = mid_slice(warped, 2)
        path = man.out / "warped_mid_slice.csv"
        write_csv(path, [f"y{j}" for j in range(sl.shape[1])], sl.tolist())
        man.add_output(path)


def cmd_sweep(args, man: RunManifest):
    cfg = _train_config(args)
    pair = load_phantom(args.data)
    man.add_input(args.data)
    man.data["config"] = {"base": cfg.to_dict(), "ms": args.ms, "sigmas": args.sigmas,
                          "epochs": args.sweep_epochs}
    path = man.out / "sweep.csv"

    def checkpoint_rows(rows):
        write_sweep(rows, path)

    rows = ff_sweep(pair, args.ms, args.sigmas, args.sweep_epochs, cfg, mode=args.mode,
                    progress=checkpoint_rows)
    man.add_output(write_sweep(rows, path))


# ------------------------------------------------------------------ parser


def _add_train_options(p):
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS), default="phantom")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, nargs=2, metavar=("BASELINE", "FIBER"),
                   help="override the two phase lengths")
    p.add_argument("--mode", choices=("fibers", "baseline"), default="fibers")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="warpfib", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"warpfib {__version__}")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS threads (fallback: WARPFIB_THREADS)")
    ap.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                    help="allow multi-threaded, non bit-reproducible runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize the cylinder phantom pair")
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--twist", choices=("arc", "angle"), default="arc")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mesh", help="generate a structured test mesh")
    p.add_argument("--kind", choices=("annulus", "box"), default="annulus")
    p.add_argument("--r-in", type=float, default=20.0)
    p.add_argument("--r-out", type=float, default=35.0)
    p.add_argument("--z0", type=float, default=-10.0)
    p.add_argument("--z1", type=float, default=10.0)
    p.add_argument("--lo", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--hi", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--n", type=int, nargs=3, default=(4, 48, 6))
    p.add_argument("--out", required=True)

    p = sub.add_parser("fibers", help="LDRB fibers on a tetrahedral mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--alpha", type=float, default=60.0, help="helix angle in degrees")
    p.add_argument("--base-threshold", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="pre-train and train a registration network")
    _add_train_options(p)
    p.add_argument("--data", required=True, help="phantom.json or a frame-sequence manifest")
    p.add_argument("--mesh")
    p.add_argument("--fibers")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint file, or 'analytic' for the phantom ground truth")
    p.add_argument("--task", required=True, choices=("mse", "landmarks", "strain", "fiberstretch"))
    p.add_argument("--data")
    p.add_argument("--mesh")
    p.add_argument("--surfaces", nargs="+", default=["endo_lv"])
    p.add_argument("--fibers")
    p.add_argument("--landmarks")
    p.add_argument("--times", type=float, nargs="+")
    p.add_argument("--vtk", action="store_true", help="also export deformed surfaces")
    p.add_argument("--out", required=True)

    p = sub.add_parser("warp", help="warp a template frame onto the reference grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--reference")
    p.add_argument("--data", help="phantom descriptor (for --checkpoint analytic)")
    p.add_argument("--frame", type=float, required=True)
    p.add_argument("--mid-slice", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="Fourier-feature (m, sigma, epochs) sweep on the phantom")
    _add_train_options(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ms", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--sigmas", type=float, nargs="+", default=[1.0, 5.0, 10.0])
    p.add_argument("--sweep-epochs", type=int, nargs="+", default=[5000, 10000, 20000])
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {"phantom": cmd_phantom, "mesh": cmd_mesh, "fibers": cmd_fibers, "train": cmd_train,
            "eval": cmd_eval, "warp": cmd_warp, "sweep": cmd_sweep}


def resolve_threads(flag):
    if flag is not None:
        return flag
    env = os.environ.get("WARPFIB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"WARPFIB_THREADS must be an integer, got {env!r}")
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {out}: {exc}") from exc
        threads = 1 if args.deterministic else args.threads
        man = RunManifest(args.command, argv, out, args.deterministic, threads)
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, man)
        man.write()
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeFormatError, MeshError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
