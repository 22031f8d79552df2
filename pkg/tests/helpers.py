"""Shared fixtures: closed-form test fields and tiny data sets."""
import numpy as np

from warpfib.phantom import texture
from warpfib.volume import FrameSequence, Volume3D


class LinearField:
    """u(t, X) = t_scale(t) * A X + b."""

    def __init__(self, A, b=(0.0, 0.0, 0.0), time_scale=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.time_scale = time_scale or (lambda t: 1.0)

    def displacement(self, t, X):
        X = np.atleast_2d(X)
        return self.time_scale(t) * (X @ self.A.T) + self.b

    def spatial_jacobian(self, t, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.time_scale(t) * self.A, (len(X), 3, 3)).copy()


class ContractingVentricle:
    """Incompressible thick-cylinder contraction about the z axis.

    z' = k z and r'^2 = (r^2 - c) / k, so det F = 1 exactly. The cavity
    radius shrinks by ``shrink * s`` and the long axis by ``shorten * s`` with
    s = t (end-systole at t = 1).
    """

    def __init__(self, r_endo=20.0, shrink=0.3, shorten=0.15):
        self.r_endo = r_endo
        self.shrink = shrink
        self.shorten = shorten

    def _params(self, t):
        k = 1.0 - self.shorten * t
        re2 = (self.r_endo * (1.0 - self.shrink * t)) ** 2
        c = self.r_endo ** 2 - k * re2
        return k, c

    def forward(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k, c = self._params(t)
        r2 = X[:, 0] ** 2 + X[:, 1] ** 2
        scale = np.sqrt((r2 - c) / k) / np.sqrt(r2)
        return np.stack([X[:, 0] * scale, X[:, 1] * scale, k * X[:, 2]], axis=1)

    def inverse(self, t, Q):
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        k, c = self._params(t)
        rp2 = Q[:, 0] ** 2 + Q[:, 1] ** 2
        scale = np.sqrt(k * rp2 + c) / np.sqrt(np.maximum(rp2, 1e-300))
        return np.stack([Q[:, 0] * scale, Q[:, 1] * scale, Q[:, 2] / k], axis=1)

    def displacement(self, t, X):
        return self.forward(t, X) - np.atleast_2d(X)

    def spatial_jacobian(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k, c = self._params(t)
        r = np.hypot(X[:, 0], X[:, 1])
        rp = np.sqrt((r * r - c) / k)
        th = np.arctan2(X[:, 1], X[:, 0])
        Fc = np.zeros((len(X), 3, 3))
        Fc[:, 0, 0] = r / (k * rp)
        Fc[:, 1, 1] = rp / r
        Fc[:, 2, 2] = k
        R = np.zeros((len(X), 3, 3))
        R[:, 0, 0], R[:, 0, 1] = np.cos(th), -np.sin(th)
        R[:, 1, 0], R[:, 1, 1] = np.sin(th), np.cos(th)
        R[:, 2, 2] = 1.0
        return R @ Fc @ np.swapaxes(R, 1, 2) - np.eye(3)


def annulus_texture_volume(points_fn, vol: Volume3D, r_in=20.0, r_out=35.0, z0=-10.0, z1=10.0):
    """Texture of the reference annulus pulled back through ``points_fn``."""
    Q = vol.grid_points()
    P = points_fn(Q)
    r = np.hypot(P[:, 0], P[:, 1])
    inside = (r >= r_in) & (r <= r_out) & (P[:, 2] >= z0) & (P[:, 2] <= z1)
    vals = np.where(inside, texture(P), 0.0)
    return vol.with_data(vals.reshape(vol.dims, order="F"))


def contracting_sequence(dims=(24, 24, 12), lo=(-40, -40, -12), hi=(40, 40, 12), field=None):
    """Two frames (t = 0, 1) of the contracting ventricle."""
    field = field or ContractingVentricle()
    grid = Volume3D.over_box(lo, hi, dims)
    f0 = annulus_texture_volume(lambda Q: Q, grid)
    f1 = annulus_texture_volume(lambda Q: field.inverse(1.0, Q), grid)
    return FrameSequence([f0, f1], [0.0, 1.0])
