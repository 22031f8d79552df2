"""Thick-walled cylinder phantom with a known compressive/torsional motion.

The motion is written in cylindrical coordinates (r, theta, z) about the z axis:

    r'     = r + s(t) (a0 + a1 r + a2 r^2)
    theta' = theta + twist,  twist = s(t) a3 (z - Z_bott) / (Z_top - Z_bott) / r
    z'     = z + s(t) a4 z

with s(t) = sin^2(pi t). By default the circumferential term a3 (...) is an
arc length in mm (hence the division by r); ``twist="angle"`` reads it as an
angle in radians instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Volume3D, add_gaussian_noise


@dataclass(frozen=True)
class PhantomSpec:
    r_endo: float = 20.0
    r_epi: float = 35.0
    z_bott: float = -10.0
    z_top: float = 10.0
    coeffs: tuple = (-16.95, 0.76, -0.01, 2.54, -0.11)
    helix_deg: tuple = (37.0, -9.0, -45.0)
    box_lo: tuple = (-40.0, -40.0, -10.0)
    box_hi: tuple = (40.0, 40.0, 10.0)
    template_time: float = 4.0 / 9.0
    noise_sigma: float = 1e-4
    dims: tuple = (80, 80, 21)
    twist: str = "arc"

    def __post_init__(self):
        if not self.r_endo < self.r_epi:
            raise ValueError("r_endo must be smaller than r_epi")
        if not self.z_bott < self.z_top:
            raise ValueError("z_bott must be smaller than z_top")
        if self.twist not in ("arc", "angle"):
            raise ValueError(f"twist must be 'arc' or 'angle', got {self.twist!r}")

    @property
    def r_mid(self) -> float:
        return 0.5 * (self.r_endo + self.r_epi)

    @property
    def height(self) -> float:
        return self.z_top - self.z_bott


def scale_factor(t):
    return np.sin(np.pi * np.asarray(t, dtype=np.float64)) ** 2


def _polar(P):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    r = np.hypot(P[:, 0], P[:, 1])
    theta = np.arctan2(P[:, 1], P[:, 0])
    return r, theta, P[:, 2]


def radial_map(spec: PhantomSpec, s, r):
    a0, a1, a2 = spec.coeffs[:3]
    return r + s * (a0 + a1 * r + a2 * r * r)


def radial_slope(spec: PhantomSpec, s, r):
    a1, a2 = spec.coeffs[1:3]
    return 1.0 + s * (a1 + 2.0 * a2 * r)


def twist(spec: PhantomSpec, s, r, z):
    """Angle increment and its partial derivatives (d/dr, d/dz)."""
    a3 = spec.coeffs[3]
    frac = (z - spec.z_bott) / spec.height
    if spec.twist == "angle":
        return s * a3 * frac, np.zeros_like(r), s * a3 / spec.height + 0 * r
    return s * a3 * frac / r, -s * a3 * frac / r ** 2, s * a3 / (spec.height * r)


def forward_map(spec: PhantomSpec, t, P):
    """Deformed positions of reference points (annulus formula, any r > 0)."""
    s = scale_factor(t)
    r, theta, z = _polar(P)
    rp = radial_map(spec, s, r)
    dth = twist(spec, s, r, z)[0]
    zp = z + s * spec.coeffs[4] * z
    return np.stack([rp * np.cos(theta + dth), rp * np.sin(theta + dth), zp], axis=1)


def inverse_map(spec: PhantomSpec, t, Q, tol=1e-10, max_iter=60):
    """Reference positions of deformed points.

    Returns ``(P, inside)``; ``inside`` is False where the recovered point
    does not lie in the reference annulus (P is still filled there).
    """
    s = scale_factor(t)
    qr, qth, qz = _polar(Q)
    z = qz / (1.0 + s * spec.coeffs[4])
    r = qr.copy()
    for _ in range(max_iter):
        res = radial_map(spec, s, r) - qr
        step = res / radial_slope(spec, s, r)
        r = r - step
        if np.all(np.abs(res) < tol):
            break
    r_safe = np.maximum(r, 1e-12)
    theta = qth - twist(spec, s, r_safe, z)[0]
    P = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    eps = 1e-9
    inside = ((r >= spec.r_endo - eps) & (r <= spec.r_epi + eps)
              & (z >= spec.z_bott - eps) & (z <= spec.z_top + eps))
    return P, inside


def in_annulus(spec: PhantomSpec, P, eps=0.0):
    r, _, z = _polar(P)
    return ((r >= spec.r_endo - eps) & (r <= spec.r_epi + eps)
            & (z >= spec.z_bott - eps) & (z <= spec.z_top + eps))


def texture(P):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    return np.sin(4 * np.pi * (x / 40 + z / 10)) * np.cos(4 * np.pi * (y / 40 + z / 10))


def cylindrical_gradient(spec: PhantomSpec, t, r, z):
    """Deformation gradient in physical cylindrical components.

    Rows refer to the deformed basis (r', theta', z), columns to the reference
    basis (r, theta, z). Shape (N, 3, 3).
    """
    s = scale_factor(t)
    r = np.asarray(r, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    rp = radial_map(spec, s, r)
    _, dth_dr, dth_dz = twist(spec, s, r, z)
    F = np.zeros(r.shape + (3, 3))
    F[..., 0, 0] = radial_slope(spec, s, r)
    F[..., 1, 0] = rp * dth_dr
    F[..., 1, 1] = rp / r
    F[..., 1, 2] = rp * dth_dz
    F[..., 2, 2] = 1.0 + s * spec.coeffs[4]
    return F


def closed_form_strains(spec: PhantomSpec, t, r, z):
    """E_ll, E_rr, E_cc on a cylinder wall (long axis z, radial normal)."""
    F = cylindrical_gradient(spec, t, r, z)
    C = np.swapaxes(F, -1, -2) @ F
    return 0.5 * (C[..., 2, 2] - 1), 0.5 * (C[..., 0, 0] - 1), 0.5 * (C[..., 1, 1] - 1)


def closed_form_fiber_stretch(spec: PhantomSpec, t, r, z):
    """lambda_f^2 for the phantom fiber at radius r (helix about the radial axis)."""
    from .fibers import phantom_helix_angle

    h = np.radians(phantom_helix_angle(spec, r))
    F = cylindrical_gradient(spec, t, r, z)
    # fiber in reference cylindrical components: (0, cos h, sin h)
    Ff = F[..., :, 1] * np.cos(h)[..., None] + F[..., :, 2] * np.sin(h)[..., None]
    return np.sum(Ff * Ff, axis=-1)


@dataclass
class AnalyticField:
    """Closed-form phantom displacement with the same surface as a CoordNet.

    Inside the annulus this is exactly ``forward_map - X``. The cavity
    (r < r_endo) is extended by a uniform radial scaling and the twist of the
    endocardium, so the warp stays continuous and maps cavity to cavity.
    With ``fixed_time`` set the field ignores the time argument.
    """

    spec: PhantomSpec = field(default_factory=PhantomSpec)
    fixed_time: float | None = None

    def _time(self, t):
        return self.fixed_time if self.fixed_time is not None else t

    def _parts(self, t, X):
        spec = self.spec
        s = scale_factor(self._time(t))
        r, theta, z = _polar(X)
        r = np.maximum(r, 1e-9)
        inner = r < spec.r_endo
        k = radial_map(spec, s, spec.r_endo) / spec.r_endo
        rp = np.where(inner, k * r, radial_map(spec, s, r))
        drp = np.where(inner, k, radial_slope(spec, s, r))
        r_tw = np.where(inner, spec.r_endo, r)
        dth, dth_dr, dth_dz = twist(spec, s, r_tw, z)
        dth_dr = np.where(inner, 0.0, dth_dr)
        zscale = 1.0 + s * spec.coeffs[4]
        return r, theta, z, rp, drp, dth, dth_dr, dth_dz, zscale

    def displacement(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        r, theta, z, rp, _, dth, _, _, zscale = self._parts(t, X)
        th2 = theta + dth
        out = np.stack([rp * np.cos(th2), rp * np.sin(th2), zscale * z], axis=1)
        return out - X

    forward = displacement

    def spatial_jacobian(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        r, theta, z, rp, drp, dth, dth_dr, dth_dz, zscale = self._parts(t, X)
        n = X.shape[0]
        Fc = np.zeros((n, 3, 3))
        Fc[:, 0, 0] = drp
        Fc[:, 1, 0] = rp * dth_dr
        Fc[:, 1, 1] = rp / r
        Fc[:, 1, 2] = rp * dth_dz
        Fc[:, 2, 2] = zscale
        F = _rotz(theta + dth) @ Fc @ np.swapaxes(_rotz(theta), 1, 2)
        return F - np.eye(3)


def _rotz(angle):
    c, s = np.cos(angle), np.sin(angle)
    R = np.zeros(np.shape(angle) + (3, 3))
    R[..., 0, 0], R[..., 0, 1] = c, -s
    R[..., 1, 0], R[..., 1, 1] = s, c
    R[..., 2, 2] = 1.0
    return R


@dataclass(frozen=True)
class PhantomPair:
    spec: PhantomSpec
    reference: Volume3D
    template: Volume3D

    def ground_truth(self) -> AnalyticField:
        return AnalyticField(self.spec, fixed_time=self.spec.template_time)

    def object_points(self) -> np.ndarray:
        """Reference voxel centers inside the annulus."""
        pts = self.reference.grid_points()
        return pts[in_annulus(self.spec, pts)]


def reference_volume(spec: PhantomSpec, dims=None) -> Volume3D:
    vol = Volume3D.over_box(spec.box_lo, spec.box_hi, dims or spec.dims)
    pts = vol.grid_points()
    vals = np.where(in_annulus(spec, pts), texture(pts), 0.0)
    return vol.with_data(vals.reshape(vol.dims, order="F"))


def template_volume(spec: PhantomSpec, t=None, dims=None) -> Volume3D:
    t = spec.template_time if t is None else t
    vol = Volume3D.over_box(spec.box_lo, spec.box_hi, dims or spec.dims)
    pts = vol.grid_points()
    P, inside = inverse_map(spec, t, pts)
    vals = np.where(inside, texture(P), 0.0)
    return vol.with_data(vals.reshape(vol.dims, order="F"))


def synthesize_pair(spec: PhantomSpec = PhantomSpec(), dims=None, seed: int = 0,
                    t=None) -> PhantomPair:
    dims = tuple(dims or spec.dims)
    if dims[0] < 32 or dims[1] < 32 or dims[2] < 21:
        raise ValueError(f"phantom grid must be at least 32x32x21, got {dims}")
    ref = reference_volume(spec, dims)
    tmpl = template_volume(spec, t, dims)
    ref = add_gaussian_noise(ref, spec.noise_sigma, seed=[seed, 0])
    tmpl = add_gaussian_noise(tmpl, spec.noise_sigma, seed=[seed, 1])
    return PhantomPair(spec, ref, tmpl)
