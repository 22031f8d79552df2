"""Finite-strain kinematics and the energies used as regularizers.

All kernels are vectorized over a leading batch axis: matrices are (N, 3, 3),
vectors (N, 3). ``du_dX[n, i, k]`` is d u_i / d X_k.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: energy substituted for W where det F <= 0 is ``BARRIER_SCALE * (1 - J)**2``
BARRIER_SCALE = 1.0e6

LONG_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class DeformationState:
    F: np.ndarray
    C: np.ndarray
    J: np.ndarray


def det3(A):
    return (A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
            - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
            + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0]))


def cofactor3(A):
    """Cofactor matrix, i.e. d(det A)/dA."""
    cof = np.empty_like(A)
    cof[..., 0, 0] = A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1]
    cof[..., 0, 1] = A[..., 1, 2] * A[..., 2, 0] - A[..., 1, 0] * A[..., 2, 2]
    cof[..., 0, 2] = A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0]
    cof[..., 1, 0] = A[..., 0, 2] * A[..., 2, 1] - A[..., 0, 1] * A[..., 2, 2]
    cof[..., 1, 1] = A[..., 0, 0] * A[..., 2, 2] - A[..., 0, 2] * A[..., 2, 0]
    cof[..., 1, 2] = A[..., 0, 1] * A[..., 2, 0] - A[..., 0, 0] * A[..., 2, 1]
    cof[..., 2, 0] = A[..., 0, 1] * A[..., 1, 2] - A[..., 0, 2] * A[..., 1, 1]
    cof[..., 2, 1] = A[..., 0, 2] * A[..., 1, 0] - A[..., 0, 0] * A[..., 1, 2]
    cof[..., 2, 2] = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return cof


def deformation_state(du_dX) -> DeformationState:
    G = np.asarray(du_dX, dtype=np.float64)
    F = G + np.eye(3)
    C = np.swapaxes(F, -1, -2) @ F
    return DeformationState(F=F, C=C, J=det3(F))


def neo_hookean(F, lam, return_grad=False):
    """W = tr(C) - 3 - 2 ln J + lam (J - 1)^2, with a quadratic barrier for J <= 0.

    Returns ``(W, barrier_mask)`` or ``(W, dW/dF, barrier_mask)``.
    """
    F = np.asarray(F, dtype=np.float64)
    J = det3(F)
    bad = J <= 0.0
    Jsafe = np.where(bad, 1.0, J)
    trC = np.einsum("...ij,...ij->...", F, F)
    W = trC - 3.0 - 2.0 * np.log(Jsafe) + lam * (J - 1.0) ** 2
    W = np.where(bad, BARRIER_SCALE * (1.0 - J) ** 2, W)
    if not return_grad:
        return W, bad
    cof = cofactor3(F)
    coef = -2.0 / Jsafe + 2.0 * lam * (J - 1.0)
    dW = 2.0 * F + coef[..., None, None] * cof
    barrier = (2.0 * BARRIER_SCALE * (J - 1.0))[..., None, None] * cof
    dW = np.where(bad[..., None, None], barrier, dW)
    return W, dW, bad


def _check_unit(f):
    f = np.asarray(f, dtype=np.float64)
    norms = np.linalg.norm(f, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("fiber directions must be unit vectors (|f| = 1 +- 1e-6)")
    return f


def fiber_stretch(F, f, return_grad=False):
    """lambda_f^2 = C : f (x) f = |F f|^2."""
    f = _check_unit(f)
    Ff = np.einsum("...ij,...j->...i", F, f)
    lf2 = np.einsum("...i,...i->...", Ff, Ff)
    if not return_grad:
        return lf2
    return lf2, 2.0 * Ff[..., :, None] * f[..., None, :]


def fiber_penalty(lambda_f2, q=2, return_grad=False):
    """(max{1, lambda_f^2} - 1)^q; zero under contraction."""
    excess = np.maximum(np.asarray(lambda_f2, dtype=np.float64) - 1.0, 0.0)
    pen = excess ** q
    if not return_grad:
        return pen
    return pen, q * excess ** (q - 1)


def lagrange_strain(C):
    return 0.5 * (np.asarray(C) - np.eye(3))


def anatomical_axes(normals, tol=1e-8):
    """Longitudinal, radial and circumferential unit vectors from surface normals.

    l is the fixed long axis (0, 0, 1); r is n orthogonalized against l; c = l x r.
    Returns ``(l, r, c, valid)``; rows with |n - (n.l) l| < tol are invalid.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    l = np.broadcast_to(LONG_AXIS, n.shape)
    rr = n - (n @ LONG_AXIS)[:, None] * LONG_AXIS
    norm = np.linalg.norm(rr, axis=1)
    valid = norm >= tol
    r = np.where(valid[:, None], rr / np.where(valid, norm, 1.0)[:, None], np.nan)
    c = np.cross(l, r)
    return l, r, c, valid


def strain_components(E, normals):
    """(E_ll, E_rr, E_cc) per point; NaN where the radial axis is undefined."""
    E = np.asarray(E, dtype=np.float64)
    l, r, c, valid = anatomical_axes(normals)
    ell = np.einsum("ni,nij,nj->n", l, E, l)
    err = np.einsum("ni,nij,nj->n", r, E, r)
    ecc = np.einsum("ni,nij,nj->n", c, E, c)
    ell = np.where(valid, ell, np.nan)
    return ell, err, ecc, valid
