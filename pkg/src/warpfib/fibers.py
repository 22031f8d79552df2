"""Fiber fields: Laplace-Dirichlet rule-based (LDRB) frames on tet meshes and
the analytic helix fibers of the cylinder phantom.

Frame convention: Q = [e0 e1 e2] with e1 the apico-basal direction, e2 the
transmural direction (endo -> epi, orthogonalized against e1) and
e0 = e1 x e2 the circumferential direction. The helix rotation turns e0
towards e1 about e2, so the fiber is f = cos(a) e0 + sin(a) e1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshError, TetMesh, nodal_gradient, solve_laplace, write_vtk

#: nodes whose apico-basal potential exceeds this are excluded from the fiber penalty
BASE_EXCLUSION_THRESHOLD = 0.9


@dataclass(frozen=True)
class HelixAngleSpec:
    alpha_endo: float
    alpha_epi: float

    def __post_init__(self):
        for a in (self.alpha_endo, self.alpha_epi):
            if not -180.0 <= a <= 180.0:
                raise ValueError(f"helix angles must lie in [-180, 180] degrees, got {a}")

    @classmethod
    def symmetric(cls, alpha: float) -> "HelixAngleSpec":
        """alpha_endo = -alpha_epi = alpha."""
        return cls(float(alpha), -float(alpha))

    def at(self, d):
        """Linearly interpolated helix angle (degrees) at transmural depth d in [0, 1]."""
        return self.alpha_endo * (1.0 - d) + self.alpha_epi * d


@dataclass
class FiberField:
    points: np.ndarray
    fibers: np.ndarray
    excluded: np.ndarray
    frames: np.ndarray | None = None
    flagged: np.ndarray | None = None
    psi_ab: np.ndarray | None = None
    psi_transmural: np.ndarray | None = None

    def active(self):
        """Points and fibers that take part in the stretch penalty."""
        keep = ~self.excluded
        return self.points[keep], self.fibers[keep]

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "fibers": self.fibers.tolist(),
            "excluded": self.excluded.astype(bool).tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> "FiberField":
        fibers = np.asarray(obj["fibers"], dtype=np.float64)
        norms = np.linalg.norm(fibers, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("fiber file contains non-unit directions")
        return cls(np.asarray(obj["points"], dtype=np.float64), fibers,
                   np.asarray(obj.get("excluded", [False] * len(fibers)), dtype=bool))


def write_fibers(field: FiberField, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(field.to_json()) + "\n")
    return path


def read_fibers(path) -> FiberField:
    return FiberField.from_json(json.loads(Path(path).read_text()))


def write_fibers_vtk(field: FiberField, path, mesh: TetMesh | None = None) -> Path:
    data = {"fiber": field.fibers, "excluded": field.excluded.astype(float)}
    if mesh is not None and len(mesh.points) == len(field.points):
        return write_vtk(path, mesh.points, mesh.tets, 10, point_data=data)
    return write_vtk(path, field.points, point_data=data)


# ------------------------------------------------------------ rotations


def rotation_to_quaternion(Q):
    """(w, x, y, z) unit quaternions with w >= 0 (Shepperd's method)."""
    Q = np.asarray(Q, dtype=np.float64)
    single = Q.ndim == 2
    Q = Q.reshape(-1, 3, 3)
    tr = np.trace(Q, axis1=1, axis2=2)
    diag = np.stack([Q[:, 0, 0], Q[:, 1, 1], Q[:, 2, 2]], 1)
    case = np.argmax(np.concatenate([tr[:, None], diag], 1), axis=1)
    q = np.empty((len(Q), 4))
    for c in range(4):
        m = case == c
        if not np.any(m):
            continue
        R = Q[m]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([0.25 * s, (R[:, 2, 1] - R[:, 1, 2]) / s,
                             (R[:, 0, 2] - R[:, 2, 0]) / s, (R[:, 1, 0] - R[:, 0, 1]) / s], 1)
        else:
            i = c - 1
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + R[:, i, i] - R[:, j, j] - R[:, k, k])
            qi = np.empty((len(R), 4))
            qi[:, 0] = (R[:, k, j] - R[:, j, k]) / s
            qi[:, 1 + i] = 0.25 * s
            qi[:, 1 + j] = (R[:, j, i] + R[:, i, j]) / s
            qi[:, 1 + k] = (R[:, k, i] + R[:, i, k]) / s
            q[m] = qi
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q


def quaternion_to_rotation(q):
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], 1).reshape(-1, 3, 3)
    return R[0] if single else R


def quaternion_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def _check_rotation(Q, name):
    Q = np.asarray(Q, dtype=np.float64)
    I = np.eye(3)
    orth = np.abs(np.swapaxes(Q, -1, -2) @ Q - I).max(axis=(-1, -2))
    if np.any(orth > 1e-6) or np.any(np.linalg.det(Q) < 0):
        raise ValueError(f"{name} is not a proper rotation")
    return Q


# identity and the half-turns about the three frame axes, with their negatives
_FLIPS = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1],
                   [-1, 0, 0, 0], [0, -1, 0, 0], [0, 0, -1, 0], [0, 0, 0, -1]], dtype=np.float64)


def bislerp(Qa, Qb, w, eps=1e-12):
    """Blend two orthonormal frames.

    Qb is replaced by whichever of its eight axis-flip equivalents has the
    quaternion closest to Qa; the pair is then slerped with weight w.
    Vectorized over a leading axis; scalar inputs return a single matrix.
    """
    Qa = _check_rotation(Qa, "Qa")
    Qb = _check_rotation(Qb, "Qb")
    single = Qa.ndim == 2
    qa = rotation_to_quaternion(Qa.reshape(-1, 3, 3))
    qb = rotation_to_quaternion(Qb.reshape(-1, 3, 3))
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (len(qa),))
    if np.any((w < 0) | (w > 1)):
        raise ValueError("bislerp weight must lie in [0, 1]")
    cands = quaternion_multiply(qb[:, None, :], _FLIPS[None, :, :])  # (N, 8, 4)
    dots = np.einsum("nk,nck->nc", qa, cands)
    best = np.argmax(dots, axis=1)  # first maximum wins ties
    qm = cands[np.arange(len(qa)), best]
    d = np.clip(dots[np.arange(len(qa)), best], -1.0, 1.0)
    theta = np.arccos(d)
    sin_t = np.sin(theta)
    near = sin_t < eps
    safe = np.where(near, 1.0, sin_t)
    ca = np.where(near, 1.0 - w, np.sin((1.0 - w) * theta) / safe)
    cb = np.where(near, w, np.sin(w * theta) / safe)
    q = ca[:, None] * qa + cb[:, None] * qm
    R = quaternion_to_rotation(q)
    return R[0] if single else R


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ------------------------------------------------------------ LDRB


def axis_frames(grad_ab, grad_tm, tol=1e-10):
    """Orthonormal frames [e0 e1 e2] from apico-basal and transmural gradients.

    Returns ``(Q, valid)``; invalid where either gradient vanishes or they are
    parallel.
    """
    nab = np.linalg.norm(grad_ab, axis=1)
    e1 = grad_ab / np.where(nab > tol, nab, 1.0)[:, None]
    e2 = grad_tm - np.einsum("ni,ni->n", e1, grad_tm)[:, None] * e1
    n2 = np.linalg.norm(e2, axis=1)
    e2 = e2 / np.where(n2 > tol, n2, 1.0)[:, None]
    e0 = np.cross(e1, e2)
    valid = (nab > tol) & (np.linalg.norm(grad_tm, axis=1) > tol) & (n2 > tol)
    return np.stack([e0, e1, e2], axis=2), valid


def orient(Q, alpha_deg):
    """Rotate frames by the helix angle about their transmural axis (beta = 0)."""
    a = np.radians(np.asarray(alpha_deg, dtype=np.float64))
    c, s = np.cos(a), np.sin(a)
    e0, e1, e2 = Q[:, :, 0], Q[:, :, 1], Q[:, :, 2]
    f = c[:, None] * e0 + s[:, None] * e1
    sheet = -s[:, None] * e0 + c[:, None] * e1
    return np.stack([f, sheet, e2], axis=2)


def ldrb_fibers(mesh: TetMesh, spec: HelixAngleSpec,
                base_threshold: float = BASE_EXCLUSION_THRESHOLD) -> FiberField:
    """Per-node LDRB fibers on a left-ventricular mesh.

    Potentials: psi_ab (apex 0, base 1) and a transmural psi (endo 0, epi 1).
    With a single endocardium the LV and epicardial candidate frames share the
    same transmural field, so the bislerp blend between them is the identity
    and the frame is the axis frame rotated by the linearly interpolated helix
    angle.
    """
    for name in ("base", "epi"):
        if name not in mesh.surfaces or len(mesh.surfaces[name]) == 0:
            raise MeshError(f"LDRB requires a '{name}' surface")
    endo = [n for n in ("endo_lv", "endo", "endo_rv") if n in mesh.surfaces]
    if not endo:
        raise MeshError("LDRB requires an endocardial surface ('endo_lv')")
    if "endo_rv" in mesh.surfaces:
        raise MeshError("biventricular meshes are not supported; provide an LV-only mesh")

    psi_ab = solve_laplace(mesh, [(mesh.resolve_apex(), 0.0), ("base", 1.0)])
    psi_tm = solve_laplace(mesh, [(endo[0], 0.0), ("epi", 1.0)])
    g_ab = nodal_gradient(mesh, psi_ab)
    g_tm = nodal_gradient(mesh, psi_tm)

    Q, valid = axis_frames(g_ab, g_tm)
    if not np.any(valid):
        raise MeshError("no node has well-defined LDRB gradients")
    frames = orient(Q, spec.at(psi_tm))
    flagged = ~valid
    if np.any(flagged):
        good = np.flatnonzero(valid)
        _, nearest = cKDTree(mesh.points[good]).query(mesh.points[flagged])
        frames[flagged] = frames[good[nearest]]
    return FiberField(
        points=mesh.points.copy(),
        fibers=frames[:, :, 0].copy(),
        excluded=psi_ab > base_threshold,
        frames=frames,
        flagged=flagged,
        psi_ab=psi_ab,
        psi_transmural=psi_tm,
    )


def helix_angle(f, e_circ, e_long):
    """Angle (degrees) of f from the circumferential axis towards the long
    axis, folded into (-90, 90] since fibers carry no sign."""
    a = np.degrees(np.arctan2(np.einsum("ni,ni->n", f, e_long), np.einsum("ni,ni->n", f, e_circ)))
    a = np.where(a > 90.0, a - 180.0, a)
    return np.where(a <= -90.0, a + 180.0, a)


def cylinder_axes(points):
    """Radial, circumferential and axial unit vectors about the z axis."""
    th = np.arctan2(points[:, 1], points[:, 0])
    rad = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], 1)
    circ = np.stack([-np.sin(th), np.cos(th), np.zeros_like(th)], 1)
    ax = np.broadcast_to([0.0, 0.0, 1.0], points.shape)
    return rad, circ, ax


# ------------------------------------------------------------ phantom fibers


def phantom_helix_angle(spec, r):
    """Piecewise-linear helix profile through (endo, mid, epi)."""
    return np.interp(r, [spec.r_endo, spec.r_mid, spec.r_epi], list(spec.helix_deg))


def phantom_fibers(spec, points, eps=1e-9):
    """Fibers of the cylinder phantom: circumferential direction rotated about
    the radial axis by the helix angle at that radius."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = np.hypot(pts[:, 0], pts[:, 1])
    if np.any((r < spec.r_endo - eps) | (r > spec.r_epi + eps)):
        raise ValueError("phantom fibers are only defined inside the annulus")
    h = np.radians(phantom_helix_angle(spec, r))
    _, circ, ax = cylinder_axes(pts)
    return np.cos(h)[:, None] * circ + np.sin(h)[:, None] * ax


def phantom_fiber_field(spec, points) -> FiberField:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return FiberField(pts, phantom_fibers(spec, pts), np.zeros(len(pts), dtype=bool))
