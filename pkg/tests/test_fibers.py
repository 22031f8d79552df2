import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpfib.fibers import (FiberField, HelixAngleSpec, bislerp, cylinder_axes, helix_angle,
                            ldrb_fibers, phantom_fibers, quaternion_to_rotation, read_fibers,
                            rot_z, rotation_to_quaternion, write_fibers, write_fibers_vtk)
from warpfib.mesh import MeshError, TetMesh, annulus_mesh, box_mesh
from warpfib.phantom import PhantomSpec


def slab_mesh(n=(4, 4, 3)):
    """Unit slab: transmural coordinate x (endo at x=0), apico-basal y."""
    box = box_mesh((0, 0, 0), (1, 1, 1), n)
    s = box.surfaces
    return TetMesh(box.points, box.tets,
                   {"endo_lv": s["xmin"], "epi": s["xmax"], "base": s["ymax"], "apex": s["ymin"]})


def random_rotation(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    return quaternion_to_rotation(q / np.linalg.norm(q))


def test_slab_alpha_zero_is_circumferential():
    field = ldrb_fibers(slab_mesh(), HelixAngleSpec.symmetric(0.0))
    assert np.allclose(np.abs(field.fibers @ [0, 0, 1]), 1.0, atol=1e-10)


def test_slab_endo_angle():
    mesh = slab_mesh()
    field = ldrb_fibers(mesh, HelixAngleSpec.symmetric(60.0))
    endo = mesh.surface_nodes("endo_lv")
    circ = np.array([0.0, 0.0, 1.0])
    ang = np.degrees(np.arccos(np.clip(np.abs(field.fibers[endo] @ circ), 0, 1)))
    assert np.all(np.abs(ang - 60.0) <= 1.0)


@pytest.fixture(scope="module")
def annulus_fibers():
    mesh = annulus_mesh()
    return mesh, ldrb_fibers(mesh, HelixAngleSpec.symmetric(60.0))


def test_annulus_endo_epi_angles(annulus_fibers):
    mesh, field = annulus_fibers
    _, circ, ax = cylinder_axes(mesh.points)
    ang = helix_angle(field.fibers, circ, ax)
    assert np.all(np.abs(ang[mesh.surface_nodes("endo_lv")] - 60.0) <= 2.0)
    assert np.all(np.abs(ang[mesh.surface_nodes("epi")] + 60.0) <= 2.0)


def test_annulus_linear_profile(annulus_fibers):
    """Helix angle follows the linear law in the harmonic transmural coordinate."""
    mesh, field = annulus_fibers
    _, circ, ax = cylinder_axes(mesh.points)
    ang = helix_angle(field.fibers, circ, ax)
    r = np.hypot(mesh.points[:, 0], mesh.points[:, 1])
    d = np.log(r / 20.0) / np.log(35.0 / 20.0)  # exact harmonic coordinate of the annulus
    assert np.abs(ang - 60.0 * (1 - 2 * d)).max() < 2.0
    # transmural midpoint: interpolate angle where d = 0.5 along one radial line
    line = np.flatnonzero((np.abs(mesh.points[:, 1]) < 1e-9) & (mesh.points[:, 0] > 0)
                          & (np.abs(mesh.points[:, 2]) < 1e-9))
    order = np.argsort(d[line])
    mid = np.interp(0.5, d[line][order], ang[line][order])
    assert abs(mid) <= 2.0


def test_annulus_monotone_transmurally(annulus_fibers):
    mesh, field = annulus_fibers
    _, circ, ax = cylinder_axes(mesh.points)
    ang = helix_angle(field.fibers, circ, ax)
    r = np.round(np.hypot(mesh.points[:, 0], mesh.points[:, 1]), 6)
    levels = np.unique(r)
    means = [ang[r == R].mean() for R in levels]
    assert np.all(np.diff(means) < 0)


def test_unit_fibers_and_orthonormal_frames(annulus_fibers):
    _, field = annulus_fibers
    assert np.abs(np.linalg.norm(field.fibers, axis=1) - 1).max() <= 1e-6
    Q = field.frames
    assert np.abs(np.swapaxes(Q, 1, 2) @ Q - np.eye(3)).max() <= 1e-6


def test_base_exclusion(annulus_fibers):
    mesh, field = annulus_fibers
    assert np.all(field.excluded == (field.psi_ab > 0.9))
    assert field.excluded[mesh.surface_nodes("base")].all()
    assert not field.excluded[mesh.surface_nodes("apex")].any()


def test_deterministic():
    mesh = annulus_mesh(n_r=2, n_theta=16, n_z=3)
    a = ldrb_fibers(mesh, HelixAngleSpec.symmetric(45.0))
    b = ldrb_fibers(mesh, HelixAngleSpec.symmetric(45.0))
    assert np.array_equal(a.fibers, b.fibers)


def test_missing_surfaces():
    mesh = annulus_mesh(n_r=2, n_theta=16, n_z=3)
    no_base = TetMesh(mesh.points, mesh.tets, {k: v for k, v in mesh.surfaces.items() if k != "base"})
    with pytest.raises(MeshError, match="base"):
        ldrb_fibers(no_base, HelixAngleSpec.symmetric(60.0))
    biv = TetMesh(mesh.points, mesh.tets, dict(mesh.surfaces, endo_rv=mesh.surfaces["endo_lv"]))
    with pytest.raises(MeshError, match="biventricular"):
        ldrb_fibers(biv, HelixAngleSpec.symmetric(60.0))


def test_helix_spec_range():
    with pytest.raises(ValueError):
        HelixAngleSpec(200.0, 0.0)
    s = HelixAngleSpec.symmetric(60.0)
    assert (s.alpha_endo, s.alpha_epi, s.at(0.5)) == (60.0, -60.0, 0.0)


def test_bislerp_examples():
    Qa, Qb = random_rotation(1), random_rotation(2)
    assert np.allclose(bislerp(Qa, Qb, 0.0), Qa, atol=1e-12)
    # w = 1 gives the equivalent of Qb closest to Qa: same axes up to sign
    B1 = bislerp(Qa, Qb, 1.0)
    assert np.allclose(np.abs(B1.T @ Qb), np.abs(np.round(B1.T @ Qb)), atol=1e-9)
    for w in (0.0, 0.3, 1.0):
        assert np.allclose(bislerp(Qa, Qa, w), Qa, atol=1e-12)
    assert np.allclose(bislerp(np.eye(3), rot_z(90.0), 0.5), rot_z(45.0), atol=1e-12)
    assert np.allclose(bislerp(np.eye(3), rot_z(30.0), 1.0), rot_z(30.0), atol=1e-12)


def test_bislerp_rejects_non_rotation():
    with pytest.raises(ValueError):
        bislerp(np.diag([1.0, 1.0, -1.0]), np.eye(3), 0.5)
    with pytest.raises(ValueError):
        bislerp(2 * np.eye(3), np.eye(3), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6), st.floats(0.0, 1.0))
def test_bislerp_returns_rotation(sa, sb, w):
    R = bislerp(random_rotation(sa), random_rotation(sb), w)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and np.isclose(np.linalg.det(R), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_quaternion_roundtrip(seed):
    R = random_rotation(seed)
    assert np.allclose(quaternion_to_rotation(rotation_to_quaternion(R)), R, atol=1e-12)


@pytest.mark.parametrize("r,deg", [(20.0, 37.0), (27.5, -9.0), (35.0, -45.0)])
def test_phantom_fiber_angles(r, deg):
    spec = PhantomSpec()
    th = 0.7
    P = np.array([[r * np.cos(th), r * np.sin(th), 3.0]])
    f = phantom_fibers(spec, P)
    _, circ, ax = cylinder_axes(P)
    assert np.isclose(helix_angle(f, circ, ax)[0], deg, atol=1e-9)
    assert np.isclose(np.linalg.norm(f), 1.0)
    # rotation is about the radial direction: no radial component
    assert abs(f[0] @ [np.cos(th), np.sin(th), 0.0]) < 1e-12


def test_phantom_fibers_reject_outside():
    with pytest.raises(ValueError):
        phantom_fibers(PhantomSpec(), np.array([[10.0, 0.0, 0.0]]))


def test_fiber_io(tmp_path, annulus_fibers):
    mesh, field = annulus_fibers
    back = read_fibers(write_fibers(field, tmp_path / "f.json"))
    assert np.allclose(back.fibers, field.fibers) and np.array_equal(back.excluded, field.excluded)
    text = write_fibers_vtk(field, tmp_path / "f.vtk", mesh).read_text()
    assert "VECTORS fiber" in text
    bad = FiberField(field.points[:1], 2 * field.fibers[:1], field.excluded[:1]).to_json()
    with pytest.raises(ValueError):
        FiberField.from_json(bad)
