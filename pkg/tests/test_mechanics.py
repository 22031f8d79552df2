import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpfib.mechanics import (BARRIER_SCALE, anatomical_axes, cofactor3, deformation_state,
                               det3, fiber_penalty, fiber_stretch, lagrange_strain, neo_hookean,
                               strain_components)


def random_F(rng, n, scale=0.2):
    return np.eye(3) + scale * rng.normal(size=(n, 3, 3))


def rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_identity_energy_zero():
    W, bad = neo_hookean(np.eye(3)[None], 1e4)
    assert W[0] == 0.0 and not bad[0]


def test_volumetric_closed_form():
    for eps in (-0.2, 0.05, 0.3):
        lam = 50.0
        F = (1 + eps) * np.eye(3)
        W, _ = neo_hookean(F[None], lam)
        expected = 3 * (1 + eps) ** 2 - 3 - 6 * np.log(1 + eps) + lam * ((1 + eps) ** 3 - 1) ** 2
        assert np.isclose(W[0], expected, rtol=1e-12)


def test_det_and_cofactor():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(10, 3, 3))
    assert np.allclose(det3(A), np.linalg.det(A))
    cof = cofactor3(A)
    assert np.allclose(cof, np.linalg.det(A)[:, None, None] * np.linalg.inv(A).transpose(0, 2, 1))


def test_energy_gradient_fd():
    rng = np.random.default_rng(1)
    F = random_F(rng, 8)
    lam = 37.0
    _, dW, _ = neo_hookean(F, lam, return_grad=True)
    h = 1e-6
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            fd = (neo_hookean(F + E, lam)[0] - neo_hookean(F - E, lam)[0]) / (2 * h)
            assert np.allclose(dW[:, i, j], fd, rtol=1e-6, atol=1e-5)


def test_barrier_for_inverted_elements():
    F = np.diag([-1.0, 1.0, 1.0])[None]
    W, dW, bad = neo_hookean(F, 10.0, return_grad=True)
    assert bad[0] and np.isclose(W[0], BARRIER_SCALE * 4.0)
    h = 1e-6
    E = np.zeros((3, 3))
    E[0, 0] = h
    fd = (neo_hookean(F + E, 10.0)[0] - neo_hookean(F - E, 10.0)[0]) / (2 * h)
    assert np.isclose(dW[0, 0, 0], fd[0], rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1e4))
def test_energy_nonnegative_and_frame_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    F = random_F(rng, 1, 0.15)
    if np.linalg.det(F[0]) <= 0:
        return
    W, _ = neo_hookean(F, lam)
    Q = rotation(rng)
    WQ, _ = neo_hookean(Q @ F, lam)
    assert W[0] >= -1e-12
    assert np.isclose(W[0], WQ[0], rtol=1e-9, atol=1e-12)


def test_fiber_stretch_examples():
    f = np.array([[0.0, 1.0, 0.0]])
    F = 1.1 * np.eye(3)[None]
    lf2 = fiber_stretch(F, f)
    assert np.isclose(lf2[0], 1.21)
    assert np.isclose(fiber_penalty(lf2)[0], 0.0441)
    assert fiber_penalty(fiber_stretch(0.9 * np.eye(3)[None], f))[0] == 0.0
    with pytest.raises(ValueError):
        fiber_stretch(F, np.array([[0.0, 2.0, 0.0]]))


def test_fiber_gradient_fd():
    rng = np.random.default_rng(2)
    F = random_F(rng, 5)
    f = rng.normal(size=(5, 3))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    lf2, d = fiber_stretch(F, f, return_grad=True)
    pen, dpen = fiber_penalty(lf2 + 0.5, return_grad=True)
    h = 1e-6
    assert np.allclose(dpen, (fiber_penalty(lf2 + 0.5 + h) - fiber_penalty(lf2 + 0.5 - h)) / (2 * h),
                       atol=1e-6)
    E = np.zeros((3, 3))
    E[1, 2] = h
    fd = (fiber_stretch(F + E, f) - fiber_stretch(F - E, f)) / (2 * h)
    assert np.allclose(d[:, 1, 2], fd, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fiber_stretch_matches_cauchy_green(seed):
    rng = np.random.default_rng(seed)
    F = random_F(rng, 1)
    f = rng.normal(size=(1, 3))
    f /= np.linalg.norm(f)
    C = deformation_state(F - np.eye(3)).C
    assert np.isclose(fiber_stretch(F, f)[0], f[0] @ C[0] @ f[0], rtol=1e-12)


def test_anatomical_axes_orthonormal():
    n = np.array([[1.0, 0.0, 0.3], [0.0, 2.0, -1.0], [0.0, 0.0, 1.0]])
    l, r, c, valid = anatomical_axes(n)
    assert list(valid) == [True, True, False]
    for k in range(2):
        M = np.stack([l[k], r[k], c[k]])
        assert np.allclose(M @ M.T, np.eye(3))
    assert np.allclose(c[0], np.cross(l[0], r[0]))


def test_strain_components_axial_stretch():
    F = np.diag([1.0, 1.0, 1.1])[None].repeat(2, 0)
    E = lagrange_strain(np.swapaxes(F, 1, 2) @ F)
    normals = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    ell, err, ecc, valid = strain_components(E, normals)
    assert np.isclose(ell[0], 0.105) and np.isclose(err[0], 0) and np.isclose(ecc[0], 0)
    assert not valid[1] and np.isnan(ell[1]) and np.isnan(err[1]) and np.isnan(ecc[1])
