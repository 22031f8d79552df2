"""Metrics on trained (or injected analytic) displacement fields.

Every function takes a *field*: any object with ``displacement(t, X)`` and
``spatial_jacobian(t, X)``, so a CoordNet and the closed-form phantom field
are interchangeable.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalFailure
from .mechanics import deformation_state, lagrange_strain, strain_components
from .mesh import SurfaceMesh, write_vtk
from .volume import Volume3D

log = logging.getLogger(__name__)

REGIONS = ("basal", "mid", "apical")
COMPONENTS = ("ll", "rr", "cc")


def _csv_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_csv_value(v) for v in r])
    return path


# ------------------------------------------------------------------ displacement


def displacement_mse(field, ground_truth, points, t=0.0) -> float:
    """Mean squared Euclidean error (mm^2) between two displacement fields."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = np.asarray(field.displacement(t, points), dtype=np.float64)
    g = np.asarray(ground_truth.displacement(t, points), dtype=np.float64)
    return float(np.mean(np.sum((u - g) ** 2, axis=1)))


def warp_volume(field, template: Volume3D, grid: Volume3D, t) -> Volume3D:
    """T_t(X + u(t, X)) sampled at the voxel centers of ``grid``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"frame time must lie in [0, 1], got {t}")
    X = grid.grid_points()
    u = np.asarray(field.displacement(t, X), dtype=np.float64)
    vals = template.sample(X + u)
    return grid.with_data(vals.reshape(grid.dims, order="F"))


def mid_slice(vol: Volume3D, axis: int = 2) -> np.ndarray:
    return np.take(vol.data, vol.dims[axis] // 2, axis=axis)


# ------------------------------------------------------------------ landmarks


@dataclass
class LandmarkSet:
    ids: list
    reference: np.ndarray  # (n, 3) at the reference frame
    frame_times: dict  # frame name -> time in [0, 1]
    positions: dict = field(default_factory=dict)  # frame name -> (n, 3), NaN where missing

    def __post_init__(self):
        self.reference = np.atleast_2d(np.asarray(self.reference, dtype=np.float64))
        if len(self.ids) != len(self.reference) or len(set(self.ids)) != len(self.ids):
            raise DataError("landmark ids must be unique and match the reference points")
        for name, pos in self.positions.items():
            if name not in self.frame_times:
                raise DataError(f"landmark frame {name!r} has no time")
            pos = np.asarray(pos, dtype=np.float64)
            if pos.shape != self.reference.shape:
                raise DataError(f"frame {name!r} needs one position per landmark")
            self.positions[name] = pos

    def to_json(self) -> dict:
        out = []
        for i, lid in enumerate(self.ids):
            pos = {k: v[i].tolist() for k, v in self.positions.items() if np.all(np.isfinite(v[i]))}
            out.append({"id": lid, "reference": self.reference[i].tolist(), "positions": pos})
        return {"frames": dict(self.frame_times), "landmarks": out}

    @classmethod
    def from_json(cls, obj) -> "LandmarkSet":
        try:
            frames = {str(k): float(v) for k, v in obj["frames"].items()}
            items = obj["landmarks"]
            ids = [str(it["id"]) for it in items]
            ref = [it["reference"] for it in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed landmark file: {exc}") from exc
        pos = {k: np.full((len(items), 3), np.nan) for k in frames}
        for i, it in enumerate(items):
            for k, p in it.get("positions", {}).items():
                if k not in frames:
                    raise DataError(f"landmark {it['id']} refers to unknown frame {k!r}")
                pos[k][i] = p
        return cls(ids, np.asarray(ref, dtype=np.float64), frames, pos)


def read_landmarks(path) -> LandmarkSet:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return LandmarkSet.from_json(obj)


def write_landmarks(lms: LandmarkSet, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(lms.to_json(), indent=1) + "\n")
    return path


@dataclass
class LandmarkReport:
    rows: list  # (id, frame, t, px, py, pz, gx, gy, gz, error)
    skipped: list

    def errors(self, frame=None) -> np.ndarray:
        return np.array([r[-1] for r in self.rows if frame is None or r[1] == frame])

    def median(self, frame=None) -> float:
        e = self.errors(frame)
        return float(np.median(e)) if len(e) else float("nan")

    def write_csv(self, path) -> Path:
        header = ("id", "frame", "t", "pred_x", "pred_y", "pred_z", "true_x", "true_y", "true_z",
                  "error")
        return write_csv(path, header, self.rows)


def track_landmarks(field, landmarks: LandmarkSet, frames=None) -> LandmarkReport:
    """Predicted positions X + u(t, X) and Euclidean errors per landmark."""
    frames = list(landmarks.positions) if frames is None else list(frames)
    rows, skipped = [], []
    for name in frames:
        if name not in landmarks.frame_times:
            raise DataError(f"unknown landmark frame {name!r}")
        t = landmarks.frame_times[name]
        gt = landmarks.positions.get(name)
        pred = landmarks.reference + np.asarray(field.displacement(t, landmarks.reference),
                                                dtype=np.float64)
        for i, lid in enumerate(landmarks.ids):
            if gt is None or not np.all(np.isfinite(gt[i])):
                log.warning("landmark %s has no annotation at frame %s; skipped", lid, name)
                skipped.append((lid, name))
                continue
            err = float(np.linalg.norm(pred[i] - gt[i]))
            rows.append((lid, name, t, *pred[i], *gt[i], err))
    return LandmarkReport(rows, skipped)


# ------------------------------------------------------------------ strain


def region_map(points, axis: int = 2):
    """Three equal bands along the long axis: 0 basal, 1 mid, 2 apical.

    The apex is taken at the minimum coordinate along ``axis``.
    Also returns the wall angle (degrees) about the cavity axis for finer
    segment grouping downstream.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, axis]
    lo, hi = z.min(), z.max()
    span = hi - lo
    if span <= 0:
        band = np.zeros(len(z), dtype=int)
    else:
        band = np.minimum(np.floor(3.0 * (z - lo) / span).astype(int), 2)
    region = 2 - band  # band 0 is next to the apex
    others = [k for k in range(3) if k != axis]
    c = points[:, others].mean(axis=0)
    angle = np.degrees(np.arctan2(points[:, others[1]] - c[1], points[:, others[0]] - c[0]))
    return region, angle


@dataclass
class StrainCurveSet:
    times: np.ndarray
    values: np.ndarray  # (region, component, frame)
    counts: np.ndarray  # valid nodes per region
    excluded: int

    def curve(self, region: str, component: str) -> np.ndarray:
        return self.values[REGIONS.index(region), COMPONENTS.index(component)]

    def write_csv(self, path) -> Path:
        header = ["t"] + [f"{r}_{c}" for r in REGIONS for c in COMPONENTS]
        rows = [[t] + list(self.values[:, :, k].ravel()) for k, t in enumerate(self.times)]
        return write_csv(path, header, rows)


def surface_strains(field, surface: SurfaceMesh, t):
    """(E_ll, E_rr, E_cc, valid) at the surface nodes."""
    jac = np.asarray(field.spatial_jacobian(t, surface.points), dtype=np.float64)
    E = lagrange_strain(deformation_state(jac).C)
    ell, err, ecc, valid = strain_components(E, surface.normals())
    return ell, err, ecc, valid


def strain_curves(field, surface: SurfaceMesh, times, regions=None) -> StrainCurveSet:
    """Regional mean strains per frame; the t=0 frame is the identity (all 0)."""
    times = np.asarray(times, dtype=np.float64)
    if regions is None:
        regions = region_map(surface.points)[0]
    regions = np.asarray(regions)
    valid = strain_components(np.zeros((len(surface.points), 3, 3)), surface.normals())[3]
    if np.any(~valid):
        log.warning("%d surface nodes without a radial direction are excluded", (~valid).sum())
    counts = np.array([np.sum(valid & (regions == r)) for r in range(3)])
    vals = np.zeros((3, 3, len(times)))
    for k, t in enumerate(times):
        if t == 0.0:
            continue
        comps = surface_strains(field, surface, t)[:3]
        for r in range(3):
            sel = valid & (regions == r)
            for c in range(3):
                vals[r, c, k] = comps[c][sel].mean() if sel.any() else np.nan
    return StrainCurveSet(times, vals, counts, int((~valid).sum()))


# ------------------------------------------------------------------ fiber stretch


def fiber_stretch_values(field, points, fibers, t) -> np.ndarray:
    jac = np.asarray(field.spatial_jacobian(t, points), dtype=np.float64)
    Ff = np.einsum("nij,nj->ni", jac + np.eye(3), fibers)
    return np.sum(Ff * Ff, axis=1)


def fiber_stretch_stats(field, points, fibers, times) -> np.ndarray:
    """Rows (t, mean, min, max) of lambda_f^2; t=0 is exactly (1, 1, 1)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    fibers = np.atleast_2d(np.asarray(fibers, dtype=np.float64))
    if np.any(np.abs(np.linalg.norm(fibers, axis=1) - 1.0) > 1e-6):
        raise DataError("fiber directions must be unit vectors")
    rows = []
    for t in np.asarray(times, dtype=np.float64):
        if t == 0.0:
            rows.append((0.0, 1.0, 1.0, 1.0))
            continue
        lf2 = fiber_stretch_values(field, points, fibers, t)
        rows.append((float(t), float(lf2.mean()), float(lf2.min()), float(lf2.max())))
    return np.array(rows)


def write_fiber_stats(rows, path) -> Path:
    return write_csv(path, ("t", "mean", "min", "max"), [tuple(r) for r in rows])


# ------------------------------------------------------------------ VTK export


def export_surface_vtk(field, surface: SurfaceMesh, t, path, fibers=None) -> Path:
    """Deformed surface with strain components (and lambda_f^2 if fibers given)."""
    u = np.asarray(field.displacement(t, surface.points), dtype=np.float64)
    ell, err, ecc, _ = surface_strains(field, surface, t)
    data = {"displacement": u, "E_ll": ell, "E_rr": err, "E_cc": ecc}
    if fibers is not None:
        data["fiber_stretch"] = fiber_stretch_values(field, surface.points, fibers, t)
    return write_vtk(path, surface.points + u, surface.triangles, 5, point_data=data)


# ------------------------------------------------------------------ FF sweep


SWEEP_FIELDS = ("m", "sigma", "epochs", "mse", "status")


def ff_sweep(pair, ms, sigmas, epochs, base_config, mode="fibers", progress=None) -> list:
    """Displacement MSE per (m, sigma, epoch budget).

    One model is trained per (m, sigma) up to the largest budget and scored
    at every smaller budget on the way. The schedule and random streams only
    depend on the iteration index, so each score equals that of a separate
    run stopped at that budget. A failing cell is recorded and the sweep
    continues.
    """
    from . import training

    problem = training.phantom_problem(pair)
    gt = pair.ground_truth()
    pts = pair.object_points()
    budgets = sorted(int(e) for e in epochs)
    rows = []
    for m in ms:
        for sigma in sigmas:
            cfg = base_config.replace(ff_m=int(m), ff_sigma=float(sigma), epochs_baseline=0,
                                      epochs_fiber=budgets[-1])
            scores = {}
            holder = {}

            def hook(row, holder=holder, scores=scores):
                done = row["epoch"] + 1
                if done in budgets and "net" in holder:
                    scores[done] = displacement_mse(holder["net"], gt, pts)

            try:
                net = training.init_network(cfg, problem)
                holder["net"] = net
                training.train(cfg, problem, mode=mode, net=net, progress=hook)
                for e in budgets:
                    rows.append((int(m), float(sigma), e, scores[e], "ok"))
            except (NumericalFailure, FloatingPointError, ValueError) as exc:
                log.error("sweep cell m=%s sigma=%s failed: %s", m, sigma, exc)
                for e in budgets:
                    if e in scores:
                        rows.append((int(m), float(sigma), e, scores[e], "ok"))
                    else:
                        rows.append((int(m), float(sigma), e, float("nan"), f"failed: {exc}"))
            if progress is not None:
                progress(rows)
    return rows


def write_sweep(rows, path) -> Path:
    return write_csv(path, SWEEP_FIELDS, rows)
