"""Tetrahedral meshes with labeled boundary surfaces.

Covers P1 Laplace solves with Dirichlet data, per-tet and per-node gradients,
point location, voxel masks, area-weighted surface normals, JSON/VTK I/O and a
few structured builders (box, thick cylinder) used as fixtures.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve


class MeshError(ValueError):
    pass


class SingularSystemError(MeshError):
    pass


class DegenerateMeshError(MeshError):
    pass


@dataclass
class TetMesh:
    points: np.ndarray
    tets: np.ndarray
    surfaces: dict = field(default_factory=dict)
    apex_node: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4).copy()
        n = len(self.points)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            raise MeshError("tet index out of range")
        surfaces = {}
        for name, tris in self.surfaces.items():
            tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
            if tris.size and (tris.min() < 0 or tris.max() >= n):
                raise MeshError(f"surface '{name}' has an index out of range")
            surfaces[name] = tris
        self.surfaces = surfaces
        if self.apex_node is not None and not 0 <= int(self.apex_node) < n:
            raise MeshError("apex_node out of range")
        # canonical orientation: positive signed volume
        neg = self.signed_volumes() < 0
        self.tets[neg, 2], self.tets[neg, 3] = self.tets[neg, 3], self.tets[neg, 2].copy()

    @property
    def n_points(self) -> int:
        return len(self.points)

    def signed_volumes(self) -> np.ndarray:
        p = self.points[self.tets]
        e = p[:, 1:] - p[:, :1]
        return np.einsum("ni,ni->n", e[:, 0], np.cross(e[:, 1], e[:, 2])) / 6.0

    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes())

    def char_lengths(self) -> np.ndarray:
        p = self.points[self.tets]
        edges = [p[:, i] - p[:, j] for i in range(4) for j in range(i + 1, 4)]
        return np.max(np.linalg.norm(np.stack(edges, 1), axis=2), axis=1)

    def barycentric_gradients(self) -> np.ndarray:
        """(M, 4, 3) gradients of the four P1 hat functions on each tet."""
        p = self.points[self.tets]
        D = np.swapaxes(p[:, 1:] - p[:, :1], 1, 2)  # columns are edge vectors
        vol = self.volumes()
        bad = vol < 1e-12 * self.char_lengths() ** 3
        if np.any(bad):
            raise DegenerateMeshError(f"{int(bad.sum())} degenerate tets (first: {np.flatnonzero(bad)[0]})")
        Dinv = np.linalg.inv(D)  # rows are grads of lambda_1..3
        G = np.empty((len(self.tets), 4, 3))
        G[:, 1:] = Dinv
        G[:, 0] = -Dinv.sum(axis=1)
        return G

    def surface_nodes(self, name) -> np.ndarray:
        if name not in self.surfaces:
            raise MeshError(f"mesh has no surface named '{name}'")
        return np.unique(self.surfaces[name])

    def boundary_faces(self) -> np.ndarray:
        """Boundary triangles oriented with outward normals."""
        t = self.tets
        local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
        faces = t[:, local].reshape(-1, 3)
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return faces[counts[inv.ravel()] == 1]

    def stiffness(self) -> sp.csr_matrix:
        G = self.barycentric_gradients()
        Ke = self.volumes()[:, None, None] * (G @ np.swapaxes(G, 1, 2))
        rows = np.repeat(self.tets, 4, axis=1).ravel()
        cols = np.tile(self.tets, (1, 4)).ravel()
        n = self.n_points
        return sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def resolve_apex(self) -> np.ndarray:
        """Node set carrying psi_ab = 0: 'apex' surface, apex_node, or the node
        farthest from the base centroid."""
        if "apex" in self.surfaces:
            return self.surface_nodes("apex")
        if self.apex_node is not None:
            return np.array([int(self.apex_node)])
        base = self.points[self.surface_nodes("base")].mean(axis=0)
        return np.array([int(np.argmax(np.linalg.norm(self.points - base, axis=1)))])

    # ------------------------------------------------------------ I/O

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "tets": self.tets.tolist(),
            "surfaces": {k: v.tolist() for k, v in self.surfaces.items()},
            "apex_node": self.apex_node,
        }

    @classmethod
    def from_json(cls, obj) -> "TetMesh":
        return cls(obj["points"], obj["tets"], obj.get("surfaces", {}), obj.get("apex_node"))


def read_mesh(path) -> TetMesh:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: malformed mesh JSON: {exc}") from exc
    return TetMesh.from_json(obj)


def write_mesh(mesh: TetMesh, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(mesh.to_json()) + "\n")
    return path


# ---------------------------------------------------------------- Laplace


def solve_laplace(mesh: TetMesh, dirichlet, rtol: float = 1e-8) -> np.ndarray:
    """P1 solution of the Laplace equation with Dirichlet data.

    ``dirichlet`` is a list of ``(surface name or node indices, value)``;
    later entries override earlier ones on shared nodes. Unconstrained
    boundary is zero-flux.
    """
    n = mesh.n_points
    fixed = np.zeros(n, dtype=bool)
    values = np.zeros(n)
    for target, value in dirichlet:
        nodes = mesh.surface_nodes(target) if isinstance(target, str) else np.asarray(target, dtype=np.int64)
        fixed[nodes] = True
        values[nodes] = value
    if not fixed.any():
        raise SingularSystemError("no Dirichlet nodes given")
    distinct = np.unique(values[fixed])
    if distinct.size < 2:
        warnings.warn("all Dirichlet values are equal; the solution is that constant", stacklevel=2)

    K = mesh.stiffness()
    free = np.flatnonzero(~fixed)
    cons = np.flatnonzero(fixed)
    used = np.zeros(n, dtype=bool)
    used[mesh.tets.ravel()] = True
    if np.any(~used[free]):
        raise SingularSystemError("mesh has free nodes not attached to any tet")
    Kff = K[free][:, free]
    Kfc = K[free][:, cons]
    # every free component must touch a constrained node
    n_comp, labels = connected_components(Kff, directed=False)
    touched = np.zeros(n_comp, dtype=bool)
    touched[labels[np.unique(Kfc.nonzero()[0])]] = True
    if not touched.all():
        raise SingularSystemError(f"{int((~touched).sum())} mesh component(s) have no Dirichlet data")

    rhs = -(Kfc @ values[cons])
    sol = values.copy()
    if free.size:
        sol[free] = spsolve(Kff.tocsc(), rhs)
        res = np.linalg.norm(Kff @ sol[free] - rhs)
        scale = max(np.linalg.norm(rhs), np.abs(Kff).sum() * np.abs(sol).max(), 1e-300)
        if res > rtol * scale:
            raise SingularSystemError(f"Laplace solve residual {res:.3e} exceeds tolerance")
    return sol


def cellwise_gradient(mesh: TetMesh, values) -> np.ndarray:
    G = mesh.barycentric_gradients()
    return np.einsum("mkd,mk->md", G, np.asarray(values, dtype=np.float64)[mesh.tets])


def nodal_gradient(mesh: TetMesh, values) -> np.ndarray:
    """Volume-weighted average of the incident tet gradients at each node."""
    g = cellwise_gradient(mesh, values)
    vol = mesh.volumes()
    acc = np.zeros((mesh.n_points, 3))
    wsum = np.zeros(mesh.n_points)
    for k in range(4):
        np.add.at(acc, mesh.tets[:, k], vol[:, None] * g)
        np.add.at(wsum, mesh.tets[:, k], vol)
    return acc / np.where(wsum > 0, wsum, 1.0)[:, None]


# ------------------------------------------------------------ point location


class TetLocator:
    """Uniform-grid bucketing of tets for vectorized point-in-mesh queries."""

    def __init__(self, mesh: TetMesh, tol: float = 1e-9):
        self.mesh = mesh
        self.tol = tol
        p = mesh.points[mesh.tets]
        self.v0 = p[:, 0]
        self.Tinv = np.linalg.inv(np.swapaxes(p[:, 1:] - p[:, :1], 1, 2))
        lo_t, hi_t = p.min(axis=1), p.max(axis=1)
        self.lo = mesh.points.min(axis=0)
        self.hi = mesh.points.max(axis=0)
        extent = np.maximum(self.hi - self.lo, 1e-12)
        cell = max(np.median(hi_t - lo_t), 1e-12)
        self.shape = np.maximum(np.ceil(extent / cell).astype(np.int64), 1)
        self.cell = extent / self.shape
        c0 = self._cell_index(lo_t)
        c1 = self._cell_index(hi_t)
        span = c1 - c0 + 1
        counts = span.prod(axis=1)
        tet_ids = np.repeat(np.arange(len(mesh.tets)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        sy, sz = span[tet_ids, 1], span[tet_ids, 2]
        ix = c0[tet_ids, 0] + offs // (sy * sz)
        iy = c0[tet_ids, 1] + (offs // sz) % sy
        iz = c0[tet_ids, 2] + offs % sz
        flat = (ix * self.shape[1] + iy) * self.shape[2] + iz
        order = np.lexsort((tet_ids, flat))
        self.bucket_tets = tet_ids[order]
        self.bucket_start = np.searchsorted(flat[order], np.arange(self.shape.prod() + 1))

    def _cell_index(self, pts):
        idx = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        return np.clip(idx, 0, self.shape - 1)

    def locate(self, points, chunk: int = 200_000) -> np.ndarray:
        """Index of a containing tet per point (lowest index wins), -1 if none."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.full(len(pts), -1, dtype=np.int64)
        slack = 1e-9 * np.max(self.hi - self.lo)
        inbox = np.all((pts >= self.lo - slack) & (pts <= self.hi + slack), axis=1)
        cand_pts = np.flatnonzero(inbox)
        if cand_pts.size == 0:
            return out
        ci = self._cell_index(pts[cand_pts])
        flat = (ci[:, 0] * self.shape[1] + ci[:, 1]) * self.shape[2] + ci[:, 2]
        start = self.bucket_start[flat]
        count = self.bucket_start[flat + 1] - start
        # process in chunks of (point, candidate) pairs
        bounds = np.searchsorted(np.cumsum(count), np.arange(chunk, count.sum() + chunk, chunk))
        lo = 0
        for hi in np.unique(np.append(bounds, len(cand_pts))):
            hi = min(hi + 1, len(cand_pts))
            if hi <= lo:
                continue
            c = count[lo:hi]
            pid = np.repeat(np.arange(lo, hi), c)
            k = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
            tid = self.bucket_tets[start[pid] + k]
            d = pts[cand_pts[pid]] - self.v0[tid]
            lam = np.einsum("nij,nj->ni", self.Tinv[tid], d)
            ok = np.all(lam >= -self.tol, axis=1) & (1.0 - lam.sum(axis=1) >= -self.tol)
            hit_p, hit_t = pid[ok], tid[ok]
            if hit_p.size:
                order = np.lexsort((hit_t, hit_p))
                hp, ht = hit_p[order], hit_t[order]
                first = np.r_[True, hp[1:] != hp[:-1]]
                out[cand_pts[hp[first]]] = ht[first]
            lo = hi
        return out


def point_in_mesh(mesh: TetMesh, points, locator: TetLocator | None = None):
    """Return ``(inside, tet_index)``; boundary points count as inside."""
    locator = locator or TetLocator(mesh)
    tet = locator.locate(points)
    return tet >= 0, tet


def voxel_mask(mesh: TetMesh, volume) -> np.ndarray:
    """Boolean (nx, ny, nz) mask of voxel centers inside the mesh."""
    inside, _ = point_in_mesh(mesh, volume.grid_points())
    return inside.reshape(volume.dims, order="F")


# ------------------------------------------------------------ surfaces


@dataclass
class SurfaceMesh:
    """Triangulated surface; triangles are assumed consistently outward."""

    points: np.ndarray
    triangles: np.ndarray
    node_ids: np.ndarray | None = None  # indices into a parent mesh, if any

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def normals(self) -> np.ndarray:
        """Unit node normals from area-weighted incident triangle normals."""
        p = self.points[self.triangles]
        area_n = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        acc = np.zeros_like(self.points)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], area_n)
        norm = np.linalg.norm(acc, axis=1)
        return acc / np.where(norm > 0, norm, 1.0)[:, None]


def extract_surface(mesh: TetMesh, names) -> SurfaceMesh:
    tris = np.concatenate([mesh.surfaces[n] for n in names]) if names else np.zeros((0, 3), int)
    nodes, local = np.unique(tris, return_inverse=True)
    return SurfaceMesh(mesh.points[nodes], local.reshape(-1, 3), node_ids=nodes)


def cylinder_surface(radius, z0, z1, n_theta, n_z, outward=1.0) -> SurfaceMesh:
    """Open cylinder wall with every quad split into four triangles about its
    center, so interior and rim node normals are exactly radial."""
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    zs = np.linspace(z0, z1, n_z + 1)
    T, Z = np.meshgrid(th, zs, indexing="ij")
    corners = np.stack([radius * np.cos(T).ravel(), radius * np.sin(T).ravel(), Z.ravel()], 1)
    nid = np.arange(n_theta * (n_z + 1)).reshape(n_theta, n_z + 1)
    i = np.arange(n_theta)[:, None]
    j = np.arange(n_z)[None, :]
    a, b = nid[i, j], nid[(i + 1) % n_theta, j]
    c, d = nid[(i + 1) % n_theta, j + 1], nid[i, j + 1]
    centers = 0.25 * (corners[a] + corners[b] + corners[c] + corners[d]).reshape(-1, 3)
    o = (len(corners) + np.arange(n_theta * n_z)).reshape(n_theta, n_z)
    a, b, c, d = (x.ravel() for x in (a, b, c, d))
    o = o.ravel()
    tris = np.concatenate([np.stack(q, 1) for q in ((a, b, o), (b, c, o), (c, d, o), (d, a, o))])
    if outward < 0:
        tris = tris[:, ::-1]
    return SurfaceMesh(np.concatenate([corners, centers]), tris)


def merge_surfaces(*surfaces: SurfaceMesh) -> SurfaceMesh:
    pts, tris, off = [], [], 0
    for s in surfaces:
        pts.append(s.points)
        tris.append(s.triangles + off)
        off += len(s.points)
    return SurfaceMesh(np.concatenate(pts), np.concatenate(tris))


# ------------------------------------------------------------ builders

_KUHN = np.array([
    [0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7],
])


def _structured_tets(shape, periodic_first=False):
    """Kuhn split of a structured (n0, n1, n2) node lattice into tets."""
    n0, n1, n2 = shape
    nid = np.arange(n0 * n1 * n2).reshape(n0, n1, n2)
    c0 = n0 if periodic_first else n0 - 1
    i, j, k = np.meshgrid(np.arange(c0), np.arange(n1 - 1), np.arange(n2 - 1), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corner = []
    for bits in range(8):
        di, dj, dk = (bits >> 0) & 1, (bits >> 1) & 1, (bits >> 2) & 1
        corner.append(nid[(i + di) % n0, j + dj, k + dk])
    corner = np.stack(corner, 1)
    return corner[:, _KUHN].reshape(-1, 4)


def _label_faces(points, faces, rules):
    surfaces = {}
    cent = points[faces].mean(axis=1)
    for name, pred in rules.items():
        sel = pred(cent)
        if np.any(sel):
            surfaces[name] = faces[sel]
    return surfaces


def box_mesh(lo=(0, 0, 0), hi=(1, 1, 1), n=(4, 4, 4)) -> TetMesh:
    """Structured box; surfaces xmin, xmax, ymin, ymax, zmin, zmax."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [np.linspace(lo[d], hi[d], n[d] + 1) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
    tets = _structured_tets((n[0] + 1, n[1] + 1, n[2] + 1))
    mesh = TetMesh(pts, tets)
    faces = mesh.boundary_faces()
    eps = 1e-9 * np.max(hi - lo)
    rules = {}
    for d, ax in enumerate("xyz"):
        rules[f"{ax}min"] = (lambda c, d=d: np.abs(c[:, d] - lo[d]) < eps)
        rules[f"{ax}max"] = (lambda c, d=d: np.abs(c[:, d] - hi[d]) < eps)
    mesh.surfaces = _label_faces(pts, faces, rules)
    return mesh


def annulus_mesh(r_in=20.0, r_out=35.0, z0=-10.0, z1=10.0, n_r=4, n_theta=48, n_z=6,
                 apex_surface=True) -> TetMesh:
    """Thick-walled cylinder about the z axis.

    Surfaces: endo_lv (r = r_in), epi (r = r_out), base (z = z1) and, when
    ``apex_surface``, apex (z = z0).
    """
    r = np.linspace(r_in, r_out, n_r + 1)
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    z = np.linspace(z0, z1, n_z + 1)
    T, R, Z = np.meshgrid(th, r, z, indexing="ij")
    pts = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel(), Z.ravel()], 1)
    tets = _structured_tets((n_theta, n_r + 1, n_z + 1), periodic_first=True)
    mesh = TetMesh(pts, tets)
    faces = mesh.boundary_faces()
    cent = pts[faces].mean(axis=1)
    rad = np.hypot(cent[:, 0], cent[:, 1])
    half_shell = 0.5 * (r_out - r_in) / n_r
    tol = 1e-9 * (z1 - z0)
    top = np.abs(cent[:, 2] - z1) < tol
    bottom = np.abs(cent[:, 2] - z0) < tol
    side = ~(top | bottom)
    surfaces = {
        "endo_lv": faces[side & (rad < r_in + half_shell)],
        "epi": faces[side & (rad > r_out - half_shell)],
        "base": faces[top],
    }
    if apex_surface:
        surfaces["apex"] = faces[bottom]
    mesh.surfaces = surfaces
    return mesh


# ------------------------------------------------------------ VTK


def write_vtk(path, points, cells=None, cell_type=10, point_data=None, cell_data=None,
              title="warpfib") -> Path:
    """Legacy ASCII UNSTRUCTURED_GRID. ``cell_type`` 10 = tet, 5 = triangle,
    1 = vertex (``cells=None`` writes one vertex cell per point)."""
    path = Path(path)
    points = np.asarray(points, dtype=np.float64)
    if cells is None:
        cells, cell_type = np.arange(len(points))[:, None], 1
    cells = np.asarray(cells, dtype=np.int64)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(points)} double"]
    lines += [" ".join(repr(float(v)) for v in p) for p in points]
    k = cells.shape[1]
    lines.append(f"CELLS {len(cells)} {len(cells) * (k + 1)}")
    lines += [f"{k} " + " ".join(str(int(i)) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(cell_type)] * len(cells)

    def block(data, n):
        out = []
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [repr(float(v)) for v in arr]
            else:
                out.append(f"VECTORS {name} double")
                out += [" ".join(repr(float(v)) for v in row) for row in arr]
        return out

    if point_data:
        lines.append(f"POINT_DATA {len(points)}")
        lines += block(point_data, len(points))
    if cell_data:
        lines.append(f"CELL_DATA {len(cells)}")
        lines += block(cell_data, len(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_mesh_vtk(mesh: TetMesh, path, point_data=None, cell_data=None) -> Path:
    return write_vtk(path, mesh.points, mesh.tets, 10, point_data, cell_data)
