import numpy as np
import pytest

from warpfib.mesh import (DegenerateMeshError, MeshError, SingularSystemError, TetMesh,
                          annulus_mesh, box_mesh, cylinder_surface, extract_surface,
                          nodal_gradient, point_in_mesh, read_mesh, solve_laplace, voxel_mask,
                          write_mesh, write_vtk)
from warpfib.volume import Volume3D


def test_slab_laplace_exact():
    mesh = box_mesh((0, 0, 0), (2, 1, 1), (6, 3, 3))
    u = solve_laplace(mesh, [("xmin", 0.0), ("xmax", 1.0)])
    assert np.abs(u - mesh.points[:, 0] / 2).max() < 1e-8
    g = nodal_gradient(mesh, u)
    assert np.abs(g - [0.5, 0, 0]).max() < 1e-8


def test_stiffness_properties():
    mesh = box_mesh(n=(3, 3, 3))
    K = mesh.stiffness().toarray()
    assert np.allclose(K, K.T)
    assert np.allclose(K.sum(axis=1), 0.0)
    assert np.all(np.linalg.eigvalsh(K) > -1e-12)


def test_volumes_sum_to_box():
    mesh = box_mesh((0, 0, 0), (2, 3, 4), (3, 4, 5))
    assert np.isclose(mesh.volumes().sum(), 24.0)
    assert np.all(mesh.signed_volumes() > 0)


def test_laplace_errors():
    mesh = box_mesh(n=(2, 2, 2))
    with pytest.raises(SingularSystemError):
        solve_laplace(mesh, [])
    with pytest.raises(MeshError, match="nope"):
        solve_laplace(mesh, [("nope", 1.0)])
    with pytest.warns(UserWarning):
        u = solve_laplace(mesh, [("xmin", 2.0), ("xmax", 2.0)])
    assert np.allclose(u, 2.0)


def test_disconnected_component_rejected():
    a = box_mesh(n=(1, 1, 1))
    pts = np.vstack([a.points, a.points + 5.0])
    tets = np.vstack([a.tets, a.tets + len(a.points)])
    mesh = TetMesh(pts, tets, {"xmin": a.surfaces["xmin"], "xmax": a.surfaces["xmax"]})
    with pytest.raises(SingularSystemError, match="component"):
        solve_laplace(mesh, [("xmin", 0.0), ("xmax", 1.0)])


def test_degenerate_tet_detected():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    mesh = TetMesh(pts, [[0, 1, 2, 3]])
    with pytest.raises(DegenerateMeshError):
        mesh.barycentric_gradients()


def test_index_validation():
    with pytest.raises(MeshError):
        TetMesh(np.zeros((3, 3)), [[0, 1, 2, 3]])


def test_annulus_surfaces_and_volume():
    mesh = annulus_mesh()
    assert set(mesh.surfaces) == {"endo_lv", "epi", "base", "apex"}
    r = np.hypot(mesh.points[:, 0], mesh.points[:, 1])
    assert np.allclose(r[mesh.surface_nodes("endo_lv")], 20.0)
    assert np.allclose(r[mesh.surface_nodes("epi")], 35.0)
    assert np.allclose(mesh.points[mesh.surface_nodes("base"), 2], 10.0)
    exact = np.pi * (35 ** 2 - 20 ** 2) * 20
    # inscribed polygons lose a little area
    assert 0.98 * exact < mesh.volumes().sum() < exact


def test_boundary_faces_outward():
    mesh = box_mesh(n=(2, 2, 2))
    faces = mesh.boundary_faces()
    p = mesh.points[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    c = p.mean(axis=1) - 0.5
    assert np.all(np.einsum("ni,ni->n", n, c) > 0)
    assert np.isclose(0.5 * np.linalg.norm(n, axis=1).sum(), 6.0)


def test_point_in_mesh_annulus():
    mesh = annulus_mesh(n_theta=64)
    rng = np.random.default_rng(0)
    P = rng.uniform([-40, -40, -12], [40, 40, 12], (5000, 3))
    inside, tet = point_in_mesh(mesh, P)
    r = np.hypot(P[:, 0], P[:, 1])
    clear_in = (r > 20.5) & (r < 34.5) & (np.abs(P[:, 2]) < 10)
    clear_out = (r < 19.5) | (r > 35.5) | (np.abs(P[:, 2]) > 10.01)
    assert np.all(inside[clear_in]) and not np.any(inside[clear_out])
    assert np.all(tet[~inside] == -1) and np.all(tet[inside] >= 0)


def test_voxel_mask():
    mesh = box_mesh((0, 0, 0), (1, 1, 1), (2, 2, 2))
    vol = Volume3D.over_box((-1, -1, -1), (2, 2, 2), (4, 4, 4))
    mask = voxel_mask(mesh, vol)
    assert mask.shape == vol.dims and mask.sum() == 8


def test_cylinder_surface_normals_radial():
    surf = cylinder_surface(20.0, 0.0, 30.0, 24, 6)
    n = surf.normals()
    radial = surf.points.copy()
    radial[:, 2] = 0
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    assert np.abs(n - radial).max() < 1e-12


def test_extract_surface():
    mesh = annulus_mesh()
    surf = extract_surface(mesh, ["endo_lv"])
    r = np.hypot(surf.points[:, 0], surf.points[:, 1])
    assert np.allclose(r, 20.0)
    n = surf.normals()
    # normals of the inner wall point into the cavity (outward from the tissue)
    assert np.all(np.einsum("ni,ni->n", n[:, :2], surf.points[:, :2]) < 0)


def test_mesh_json_roundtrip(tmp_path):
    mesh = annulus_mesh(n_r=2, n_theta=12, n_z=2)
    back = read_mesh(write_mesh(mesh, tmp_path / "m.json"))
    assert np.array_equal(back.points, mesh.points) and np.array_equal(back.tets, mesh.tets)
    assert all(np.array_equal(back.surfaces[k], mesh.surfaces[k]) for k in mesh.surfaces)


def test_vtk_writer(tmp_path):
    mesh = box_mesh(n=(1, 1, 1))
    path = write_vtk(tmp_path / "m.vtk", mesh.points, mesh.tets, 10,
                     point_data={"phi": mesh.points[:, 0], "vec": mesh.points})
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version")
    assert f"POINTS {len(mesh.points)}" in text
    assert "CELL_TYPES" in text and "SCALARS phi" in text and "VECTORS vec" in text
