"""Fourier-feature coordinate MLP with exact spatial Jacobians.

The network maps (t, X) to a displacement u(t, X) in mm. Spatial coordinates
are rescaled to [-1, 1]^3 over a bounding box, encoded with random Fourier
features [cos(B x), sin(B x)], optionally followed by the raw time, and fed
through tanh hidden layers and a linear output layer.

The spatial Jacobian du/dX is propagated forward as three tangent streams
alongside the values; parameter gradients of any loss depending on u and
du/dX are obtained by a hand-written reverse sweep over both streams.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FourierMap:
    B: np.ndarray  # (m, 3), entries ~ N(0, sigma^2)
    sigma: float

    @classmethod
    def sample(cls, m: int, sigma: float, rng: np.random.Generator) -> "FourierMap":
        B = rng.normal(0.0, sigma, size=(m, 3))
        B.flags.writeable = False
        return cls(B=B, sigma=float(sigma))

    @property
    def m(self) -> int:
        return self.B.shape[0]

    def encode(self, X) -> np.ndarray:
        P = np.atleast_2d(X) @ self.B.T
        return np.concatenate([np.cos(P), np.sin(P)], axis=1)


def ffm_encode(fmap: FourierMap, X) -> np.ndarray:
    return fmap.encode(X)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class CoordNet:
    """û(t, X; θ). Parameters live in one flat vector ``theta``; ``weights``
    and ``biases`` are views into it, so in-place updates of ``theta`` are
    seen by every evaluation.
    """

    def __init__(self, fmap: FourierMap, hidden: int, layers: int, box_lo, box_hi,
                 time_dependent: bool = True, dtype=np.float64, theta=None):
        self.fmap = fmap
        self.hidden = int(hidden)
        self.layers = int(layers)
        self.time_dependent = bool(time_dependent)
        self.box_lo = np.asarray(box_lo, dtype=np.float64)
        self.box_hi = np.asarray(box_hi, dtype=np.float64)
        self.center = 0.5 * (self.box_lo + self.box_hi)
        self.half = 0.5 * (self.box_hi - self.box_lo)
        if np.any(self.half <= 0):
            raise ValueError("bounding box must have positive extent")
        self.dtype = np.dtype(dtype)

        d_in = 2 * fmap.m + (1 if self.time_dependent else 0)
        self.widths = [d_in] + [self.hidden] * self.layers + [3]
        self.shapes = list(zip(self.widths[:-1], self.widths[1:]))
        self.n_params = sum(a * b + b for a, b in self.shapes)
        if theta is None:
            theta = np.zeros(self.n_params)
        theta = np.asarray(theta, dtype=self.dtype)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        self.theta = theta.copy()
        self._bind_views()

        # scaled frequencies for d(BXn)/dX, cast once
        self._B = (fmap.B / self.half).astype(self.dtype)

    def _bind_views(self):
        self.weights, self.biases = [], []
        off = 0
        for a, b in self.shapes:
            self.weights.append(self.theta[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.theta[off:off + b])
            off += b

    def set_theta(self, theta) -> None:
        self.theta[...] = theta

    def copy(self) -> "CoordNet":
        return CoordNet(self.fmap, self.hidden, self.layers, self.box_lo, self.box_hi,
                        self.time_dependent, self.dtype, self.theta)

    # ------------------------------------------------------------------ eval

    def _inputs(self, t, X, jacobian):
        """Layer-0 input stacked with its tangents: (1 or 4, n, d_in).

        Slot 0 holds the values, slot 1 + k the derivative w.r.t. X_k.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = X.shape[0]
        m = self.fmap.m
        d_in = self.widths[0]
        P = (((X - self.center) / self.half) @ self.fmap.B.T).astype(self.dtype)
        S = np.zeros((4 if jacobian else 1, n, d_in), dtype=self.dtype)
        cos, sin = np.cos(P), np.sin(P)
        S[0, :, :m] = cos
        S[0, :, m:2 * m] = sin
        if self.time_dependent:
            S[0, :, 2 * m] = np.broadcast_to(np.asarray(t, dtype=self.dtype).reshape(-1), (n,))
        if jacobian:
            for k in range(3):
                bk = self._B[:, k]
                np.multiply(sin, -bk, out=S[1 + k, :, :m])
                np.multiply(cos, bk, out=S[1 + k, :, m:2 * m])
        return S

    def evaluate(self, t, X, jacobian=False):
        """Return ``(u, du_dX or None, cache)``; the cache feeds :meth:`backward`."""
        S = self._inputs(t, X, jacobian)
        ns, n, _ = S.shape
        # stacked layer inputs and the tangent part of each pre-activation
        stacks, dzs = [S], [None]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            Z = (S.reshape(-1, W.shape[0]) @ W).reshape(ns, n, -1)
            Z[0] += b
            if l == last:
                S = Z
                break
            S = np.empty_like(Z)
            np.tanh(Z[0], out=S[0])
            if ns > 1:
                sp = 1.0 - S[0] * S[0]
                np.multiply(Z[1:], sp, out=S[1:])
                dzs.append(Z[1:])
            else:
                dzs.append(None)
            stacks.append(S)
        jac = np.transpose(S[1:], (1, 2, 0)) if ns > 1 else None
        return S[0], jac, (stacks, dzs, jacobian)

    def forward(self, t, X) -> np.ndarray:
        return self.evaluate(t, X)[0]

    def displacement(self, t, X) -> np.ndarray:
        return self.forward(t, X)

    def spatial_jacobian(self, t, X) -> np.ndarray:
        return self.evaluate(t, X, jacobian=True)[1]

    def backward(self, cache, grad_u=None, grad_jac=None) -> np.ndarray:
        """Gradient w.r.t. ``theta`` of a scalar loss with adjoints
        ``grad_u = dL/du`` (N, 3) and ``grad_jac = dL/d(du/dX)`` (N, 3, 3)."""
        stacks, dzs, has_jac = cache
        n = stacks[0].shape[1]
        if grad_jac is not None and not has_jac:
            raise ValueError("Jacobian adjoint given but evaluation ran without tangents")
        ns = 4 if grad_jac is not None else 1
        G = np.zeros((ns, n, 3), dtype=self.dtype)
        if grad_u is not None:
            G[0] = grad_u
        if grad_jac is not None:
            G[1:] = np.transpose(np.asarray(grad_jac, dtype=self.dtype), (2, 0, 1))

        grads = [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            W = self.weights[l]
            d_in, d_out = W.shape
            S_in = stacks[l][:ns]
            gW = S_in.reshape(-1, d_in).T @ G.reshape(-1, d_out)
            grads[l] = (gW.ravel(), G[0].sum(axis=0))
            if l == 0:
                break
            # back through a = tanh(z), da = (1 - a^2) dz
            GA = (G.reshape(-1, d_out) @ W.T).reshape(ns, n, d_in)
            a = S_in[0]
            sp = 1.0 - a * a
            if ns > 1:
                corr = np.einsum("knd,knd->nd", GA[1:], dzs[l])
                corr *= 2.0 * a
                GA[0] -= corr
            GA *= sp
            G = GA
        return np.concatenate([g for pair in grads for g in pair])

    # ------------------------------------------------------------- checkpoint

    def metadata(self) -> dict:
        return {
            "format": "warpfib-coordnet-1",
            "m": self.fmap.m,
            "sigma": self.fmap.sigma,
            "B": self.fmap.B.tolist(),
            "hidden": self.hidden,
            "layers": self.layers,
            "time_dependent": self.time_dependent,
            "box_lo": self.box_lo.tolist(),
            "box_hi": self.box_hi.tolist(),
            "widths": self.widths,
            "n_params": self.n_params,
            "activation": "tanh",
        }


def xavier_init(m: int, sigma: float, hidden: int, layers: int, box_lo, box_hi,
                seed: int, time_dependent: bool = True, dtype=np.float64) -> CoordNet:
    """Glorot-uniform weights, zero biases, Gaussian Fourier frequencies."""
    rng = np.random.default_rng(seed)
    fmap = FourierMap.sample(m, sigma, rng)
    net = CoordNet(fmap, hidden, layers, box_lo, box_hi, time_dependent, dtype)
    for W in net.weights:
        bound = xavier_bound(*W.shape)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return net


def zero_like(net: CoordNet) -> CoordNet:
    out = net.copy()
    out.theta[...] = 0.0
    return out


def save_checkpoint(net: CoordNet, path, extra: dict | None = None) -> Path:
    """``<name>.ckpt.json`` metadata plus ``<name>.ckpt.raw`` float64 LE parameters."""
    path = Path(path)
    stem = path.name[: -len(".ckpt.json")] if path.name.endswith(".ckpt.json") else path.stem
    raw = path.with_name(stem + ".ckpt.raw")
    meta = net.metadata()
    meta["raw"] = raw.name
    if extra:
        meta["extra"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(net.theta.astype("<f8").tobytes())
    path.write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_checkpoint(path, dtype=np.float64) -> CoordNet:
    path = Path(path)
    meta = json.loads(path.read_text())
    B = np.asarray(meta["B"], dtype=np.float64)
    B.flags.writeable = False
    fmap = FourierMap(B=B, sigma=float(meta["sigma"]))
    theta = np.frombuffer(path.with_name(meta["raw"]).read_bytes(), dtype="<f8")
    return CoordNet(fmap, meta["hidden"], meta["layers"], meta["box_lo"], meta["box_hi"],
                    meta["time_dependent"], dtype, theta)
