"""Loss assembly, collocation sampling, identity pre-training and the Adam loop.

The total loss at one iteration is

    data + mu * (mean W(lambda_myo) over myocardium + mean W(lambda_bg) over background)
         + mu_f * mean (max(1, lambda_f^2) - 1)^q

where the data term compares the reference image with one template frame
(frames are cycled, one per iteration) warped by phi = X + u.
Training runs in two phases: a baseline phase without the fiber term and a
second phase in which the fiber term is switched on (``mode="fibers"``) or
kept off (``mode="baseline"``). An epoch is one pass over the data frames.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, NumericalFailure
from .fibers import FiberField, phantom_fibers
from .mechanics import fiber_penalty, fiber_stretch, neo_hookean
from .mesh import TetLocator, TetMesh, point_in_mesh
from .network import CoordNet, save_checkpoint, xavier_init
from .phantom import PhantomPair, in_annulus
from .volume import FrameSequence, Volume3D

log = logging.getLogger(__name__)

# random stream tags: every draw uses default_rng([seed, stream, iteration])
STREAM_PIXELS, STREAM_COLLOC, STREAM_FIBERS, STREAM_PRETRAIN, STREAM_FIXED = range(5)

METRIC_FIELDS = ("epoch", "data_loss", "elastic_loss", "fiber_loss", "total",
                 "j_barrier_count", "seconds")


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Hyper-parameters. Defaults are the phantom setting."""

    layers: int = 5
    width: int = 64
    ff_m: int = 8
    ff_sigma: float = 1.0
    time_dependent: bool = False
    mu: float = 1e-2
    lambda_myo: float = 1e4
    lambda_bg: float = 50.0
    mu_f: float = 100.0
    # in resample mode n_myo + n_bg points are drawn uniformly over the image
    # box and split by tissue membership; otherwise exactly n_myo / n_bg
    n_myo: int = 10000
    n_bg: int = 10000
    n_fiber: int = 1000
    lr: float = 1e-3
    pretrain_tol: float = 1e-6
    pretrain_max_iter: int = 20000
    pretrain_batch: int = 4096
    epochs_baseline: int = 0
    epochs_fiber: int = 10000
    seed: int = 0
    resample_spatial: bool = True
    p: int = 1
    q: int = 2
    alpha: float = 60.0
    exclude_base: bool = True
    # pixels per data-term evaluation; None uses every reference voxel
    n_pixels: int | None = None
    dtype: str = "float64"
    deterministic: bool = True
    threads: int | None = None
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("mu", "lambda_myo", "lambda_bg", "mu_f", "lr", "pretrain_tol", "ff_sigma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a non-negative number, got {v!r}")
        if self.lambda_myo < self.lambda_bg:
            raise ConfigError("lambda_myo must be at least lambda_bg")
        for name in ("layers", "width", "ff_m", "n_myo", "n_bg", "n_fiber", "pretrain_batch",
                     "pretrain_max_iter"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        for name in ("epochs_baseline", "epochs_fiber"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.p < 1 or self.q < 1:
            raise ConfigError("exponents p and q must be >= 1")
        if self.n_pixels is not None and self.n_pixels < 1:
            raise ConfigError("n_pixels must be >= 1 or null")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not -180.0 <= self.alpha <= 180.0:
            raise ConfigError("alpha must lie in [-180, 180] degrees")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        base = PRESETS[obj.pop("preset")]() if "preset" in obj else cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return dataclasses.replace(base, **obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def phantom_config(**changes) -> TrainConfig:
    return TrainConfig(**changes)


def miccai_config(**changes) -> TrainConfig:
    base = dict(ff_m=32, ff_sigma=1.0, time_dependent=True, lambda_myo=1e5, lambda_bg=1.0,
                n_myo=1000, n_bg=1000, n_fiber=1000, pretrain_tol=1e-5,
                epochs_baseline=3500, epochs_fiber=1500, resample_spatial=False)
    base.update(changes)
    return TrainConfig(**base)


PRESETS = {"phantom": phantom_config, "miccai": miccai_config}


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if isinstance(obj, dict) and obj.get("preset") not in (None, *PRESETS):
        raise ConfigError(f"unknown preset {obj['preset']!r}")
    return TrainConfig.from_dict(obj)


def save_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=1) + "\n")
    return path


# ------------------------------------------------------------------ problem


@dataclass
class RegistrationProblem:
    """Everything training needs besides the network.

    ``frames[i]`` is observed at ``frame_times[i]``; the reference image is the
    t=0 frame. ``is_myo`` classifies points of the reference configuration and
    ``fiber_sampler(rng, n)`` returns ``(points, unit fibers)`` or None.
    """

    reference: Volume3D
    frames: list
    frame_times: np.ndarray
    is_myo: Callable
    fiber_sampler: Callable | None = None

    @property
    def box(self):
        return self.reference.bounds

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def pixel_points(self):
        return self.reference.grid_points()


def annulus_sampler(spec):
    """Uniform points in the phantom annulus with their analytic fibers."""

    def sample(rng, n):
        r = np.sqrt(rng.uniform(spec.r_endo ** 2, spec.r_epi ** 2, n))
        th = rng.uniform(-np.pi, np.pi, n)
        z = rng.uniform(spec.z_bott, spec.z_top, n)
        P = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
        return P, phantom_fibers(spec, P)

    return sample


def field_sampler(fibers: FiberField, exclude_base: bool = True):
    """Random subsets of a fiber field (base-excluded points dropped)."""
    keep = ~fibers.excluded if exclude_base else np.ones(len(fibers.points), dtype=bool)
    pts, dirs = fibers.points[keep], fibers.fibers[keep]
    if len(pts) == 0:
        raise DataError("fiber field has no usable (non-excluded) points")

    def sample(rng, n):
        idx = rng.choice(len(pts), n, replace=n > len(pts))
        return pts[idx], dirs[idx]

    return sample


def phantom_problem(pair: PhantomPair) -> RegistrationProblem:
    spec = pair.spec
    return RegistrationProblem(
        reference=pair.reference,
        frames=[pair.template],
        frame_times=np.array([spec.template_time]),
        is_myo=lambda P: in_annulus(spec, P),
        fiber_sampler=annulus_sampler(spec),
    )


def sequence_problem(seq: FrameSequence, mesh: TetMesh, fibers: FiberField | None = None,
                     exclude_base: bool = True) -> RegistrationProblem:
    locator = TetLocator(mesh)
    return RegistrationProblem(
        reference=seq.reference,
        frames=list(seq.frames[1:]),
        frame_times=np.asarray(seq.times[1:], dtype=np.float64),
        is_myo=lambda P: point_in_mesh(mesh, P, locator)[0],
        fiber_sampler=None if fibers is None else field_sampler(fibers, exclude_base),
    )


# ------------------------------------------------------------------ collocation


@dataclass
class CollocationBatch:
    myo_X: np.ndarray
    myo_t: np.ndarray
    bg_X: np.ndarray
    bg_t: np.ndarray
    fib_X: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fib_f: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fib_t: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def validate(self, is_myo) -> None:
        for name in ("myo_t", "bg_t", "fib_t"):
            t = getattr(self, name)
            if np.any((t < 0) | (t > 1)):
                raise DataError(f"{name} outside [0, 1]")
        if len(self.myo_X) and not np.all(is_myo(self.myo_X)):
            raise DataError("myocardial collocation point outside the myocardium")
        if len(self.bg_X) and np.any(is_myo(self.bg_X)):
            raise DataError("background collocation point inside the myocardium")
        if len(self.fib_X) and not np.all(is_myo(self.fib_X)):
            raise DataError("fiber point outside the myocardium")


def _uniform_box(rng, lo, hi, n):
    return lo + (hi - lo) * rng.uniform(size=(n, 3))


def fixed_spatial_sets(problem: RegistrationProblem, config: TrainConfig, max_rounds: int = 200):
    """Myocardial and background point sets drawn once (rejection sampling)."""
    rng = np.random.default_rng([config.seed, STREAM_FIXED])
    lo, hi = problem.box
    myo, bg = [], []
    n_myo = n_bg = 0
    chunk = max(4 * (config.n_myo + config.n_bg), 1024)
    for _ in range(max_rounds):
        P = _uniform_box(rng, lo, hi, chunk)
        inside = problem.is_myo(P)
        myo.append(P[inside])
        bg.append(P[~inside])
        n_myo += inside.sum()
        n_bg += (~inside).sum()
        if n_myo >= config.n_myo and n_bg >= config.n_bg:
            return np.concatenate(myo)[: config.n_myo], np.concatenate(bg)[: config.n_bg]
    if n_myo == 0:
        raise DataError("myocardial mask is empty inside the image box")
    raise DataError("could not draw enough collocation points; mask nearly fills or misses the box")


def sample_collocation(problem: RegistrationProblem, config: TrainConfig, iteration: int,
                       fixed=None, with_fibers: bool = True) -> CollocationBatch:
    """Collocation batch for one iteration, deterministic in (seed, iteration).

    With ``resample_spatial`` the spatial points are redrawn every iteration;
    otherwise ``fixed`` (from :func:`fixed_spatial_sets`) is reused and only
    the times change.
    """
    rng = np.random.default_rng([config.seed, STREAM_COLLOC, iteration])
    if config.resample_spatial:
        lo, hi = problem.box
        P = _uniform_box(rng, lo, hi, config.n_myo + config.n_bg)
        inside = np.asarray(problem.is_myo(P), dtype=bool)
        myo_X, bg_X = P[inside], P[~inside]
    else:
        if fixed is None:
            fixed = fixed_spatial_sets(problem, config)
        myo_X, bg_X = fixed
    myo_t = rng.uniform(size=len(myo_X))
    bg_t = rng.uniform(size=len(bg_X))
    batch = CollocationBatch(myo_X, myo_t, bg_X, bg_t)
    if with_fibers and problem.fiber_sampler is not None:
        frng = np.random.default_rng([config.seed, STREAM_FIBERS, iteration])
        batch.fib_X, batch.fib_f = problem.fiber_sampler(frng, config.n_fiber)
        batch.fib_t = frng.uniform(size=len(batch.fib_X))
    return batch


# ------------------------------------------------------------------ losses


def _field_values(field, t, X):
    return np.asarray(field.displacement(t, X), dtype=np.float64)


def _field_jacobian(field, t, X):
    return np.asarray(field.spatial_jacobian(t, X), dtype=np.float64)


def data_term(u, points, ref_values, template: Volume3D, p: int = 1):
    """Mean |R - T(X + u)|^p and its adjoint w.r.t. u."""
    vals, grad = template.sample(points + u, return_grad=True)
    res = ref_values - vals
    n = len(res)
    a = np.abs(res)
    loss = np.mean(a ** p)
    coef = p * a ** (p - 1) * np.sign(res) if p > 1 else np.sign(res)
    # d|r|^p/du = p|r|^(p-1) sign(r) * (-grad T)
    return loss, -(coef / n)[:, None] * grad


def data_loss(field, reference: Volume3D, template: Volume3D, frame_time, pixel_points=None,
              p: int = 1, return_grad: bool = False):
    """Mean absolute intensity difference between R(X) and T_t(X + u(t, X))."""
    if pixel_points is None:
        pixel_points = reference.grid_points()
        ref_vals = reference.flat().astype(np.float64)
    else:
        ref_vals = reference.sample(pixel_points)
    if not return_grad:
        u = _field_values(field, frame_time, pixel_points)
        return data_term(u, pixel_points, ref_vals, template, p)[0]
    u, _, cache = field.evaluate(frame_time, pixel_points)
    loss, gu = data_term(np.asarray(u, dtype=np.float64), pixel_points, ref_vals, template, p)
    return loss, field.backward(cache, grad_u=gu)


def elastic_term(jac, n_myo, lambda_myo, lambda_bg):
    """mean W over the first n_myo rows (lambda_myo) + mean W over the rest
    (lambda_bg). Returns (loss, dloss/djac, barrier count)."""
    F = jac + np.eye(3)
    lam = np.where(np.arange(len(F)) < n_myo, lambda_myo, lambda_bg)
    W, dW, bad = neo_hookean(F, lam, return_grad=True)
    n_bg = len(F) - n_myo
    weights = np.where(np.arange(len(F)) < n_myo,
                       1.0 / max(n_myo, 1), 1.0 / max(n_bg, 1))
    loss = (W[:n_myo].mean() if n_myo else 0.0) + (W[n_myo:].mean() if n_bg else 0.0)
    return loss, weights[:, None, None] * dW, int(bad.sum())


def fiber_term(jac, fibers, mu_f, q=2):
    """mu_f * mean (max(1, lambda_f^2) - 1)^q and its adjoint w.r.t. jac."""
    if len(jac) == 0:
        return 0.0, jac.copy()
    F = jac + np.eye(3)
    lf2, dlf2 = fiber_stretch(F, fibers, return_grad=True)
    pen, dpen = fiber_penalty(lf2, q, return_grad=True)
    n = len(pen)
    return mu_f * pen.mean(), (mu_f / n) * dpen[:, None, None] * dlf2


def elastic_loss(field, batch: CollocationBatch, lambda_myo, lambda_bg):
    """Mean neo-Hookean energy over myocardial plus background points."""
    X = np.concatenate([batch.myo_X, batch.bg_X])
    t = np.concatenate([batch.myo_t, batch.bg_t])
    jac = _field_jacobian(field, t, X) if len(X) else np.zeros((0, 3, 3))
    loss, _, bad = elastic_term(jac, len(batch.myo_X), lambda_myo, lambda_bg)
    return loss


def fiber_loss(field, batch: CollocationBatch, mu_f, q=2):
    if len(batch.fib_X) == 0:
        return 0.0
    jac = _field_jacobian(field, batch.fib_t, batch.fib_X)
    return fiber_term(jac, batch.fib_f, mu_f, q)[0]


def regularizer_step(net: CoordNet, batch: CollocationBatch, config: TrainConfig, mu_f: float):
    """Elastic and fiber terms with one Jacobian evaluation.

    Returns (elastic, fiber_contribution, barrier_count, grad_theta); the
    elastic value is unweighted, its gradient is scaled by mu.
    """
    n_e = len(batch.myo_X) + len(batch.bg_X)
    use_fib = mu_f > 0 and len(batch.fib_X) > 0
    X = [batch.myo_X, batch.bg_X] + ([batch.fib_X] if use_fib else [])
    t = [batch.myo_t, batch.bg_t] + ([batch.fib_t] if use_fib else [])
    X, t = np.concatenate(X), np.concatenate(t)
    _, jac, cache = net.evaluate(t, X, jacobian=True)
    jac = jac.astype(np.float64)
    e_loss, g_e, bad = elastic_term(jac[:n_e], len(batch.myo_X), config.lambda_myo,
                                    config.lambda_bg)
    g_jac = np.empty_like(jac)
    g_jac[:n_e] = config.mu * g_e
    f_loss = 0.0
    if use_fib:
        f_loss, g_f = fiber_term(jac[n_e:], batch.fib_f, mu_f, config.q)
        g_jac[n_e:] = g_f
    return e_loss, f_loss, bad, net.backward(cache, grad_jac=g_jac)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; ``params`` is updated in place and returned."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.m.shape or params.shape != g.shape:
        raise ValueError("parameter, gradient and optimizer state sizes differ")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    params[...] = params - step.astype(params.dtype)
    return params


# ------------------------------------------------------------------ pre-training


@dataclass
class PretrainResult:
    converged: bool
    loss: float
    iterations: int


def identity_loss(net: CoordNet, points, frame_times):
    """(1/N_fr) sum_i mean_j |u(t_i, X_j)|^2."""
    return float(np.mean([np.mean(np.sum(net.forward(t, points).astype(np.float64) ** 2, axis=1))
                          for t in frame_times]))


def pretrain_identity(net: CoordNet, points, frame_times, tol, max_iter=20000, lr=1e-3,
                      seed=0, batch=4096, check_every=25, probe=8192) -> PretrainResult:
    """Adam descent on the identity loss until it falls below ``tol``.

    Each step uses a random pixel minibatch; convergence is screened on a
    fixed probe subset and confirmed on the full pixel set.
    """
    points = np.asarray(points, dtype=np.float64)
    frame_times = np.atleast_1d(np.asarray(frame_times, dtype=np.float64))
    if not net.time_dependent:
        frame_times = frame_times[:1]
    prng = np.random.default_rng([seed, STREAM_PRETRAIN])
    probe_pts = points[prng.choice(len(points), min(probe, len(points)), replace=False)]
    state = AdamState.zeros(net.n_params)
    loss = identity_loss(net, probe_pts, frame_times)
    it = 0
    while it < max_iter:
        if it % check_every == 0:
            loss = identity_loss(net, probe_pts, frame_times)
            if loss < tol:
                full = identity_loss(net, points, frame_times)
                if full < tol:
                    return PretrainResult(True, full, it)
        rng = np.random.default_rng([seed, STREAM_PRETRAIN, it])
        idx = rng.integers(0, len(points), min(batch, len(points)))
        X = points[idx]
        grad = np.zeros(net.n_params)
        scale = 2.0 / (len(X) * len(frame_times))
        for t in frame_times:
            u, _, cache = net.evaluate(t, X)
            grad += net.backward(cache, grad_u=scale * u)
        adam_step(net.theta, grad, state, lr)
        it += 1
    loss = identity_loss(net, points, frame_times)
    return PretrainResult(loss < tol, loss, it)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    net: CoordNet
    metrics: list
    pretrain: PretrainResult
    timings: dict
    mode: str


def thread_limit(config: TrainConfig):
    """Context manager pinning BLAS threads (1 in deterministic mode)."""
    n = 1 if config.deterministic else config.threads
    return threadpool_limits(limits=n)


def write_metrics(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) if k != "j_barrier_count"
                                       else int(r[k]) for k in METRIC_FIELDS[1:]])
    return path


def read_metrics(path) -> list:
    with Path(path).open() as fh:
        return [{k: (int(v) if k in ("epoch", "j_barrier_count") else float(v))
                 for k, v in row.items()} for row in csv.DictReader(fh)]


def init_network(config: TrainConfig, problem: RegistrationProblem) -> CoordNet:
    lo, hi = problem.box
    return xavier_init(config.ff_m, config.ff_sigma, config.width, config.layers, lo, hi,
                       seed=config.seed, time_dependent=config.time_dependent,
                       dtype=np.dtype(config.dtype))


def _abort(net, snapshot_dir, epoch, it, losses):
    """Write a failure checkpoint (if requested) and raise NumericalFailure."""
    snap = dict(epoch=epoch, iteration=it, **losses)
    if snapshot_dir is not None:
        snap["checkpoint"] = str(save_checkpoint(
            net, Path(snapshot_dir) / "failure.ckpt.json", extra=snap))
    raise NumericalFailure(f"non-finite loss or gradient at epoch {epoch}, iteration {it}", snap)


def train(config: TrainConfig, problem: RegistrationProblem, mode: str = "fibers",
          net: CoordNet | None = None, pretrain: bool = True, snapshot_dir=None,
          progress: Callable | None = None) -> TrainResult:
    """Pre-train to the identity, then run the two-phase schedule."""
    if mode not in ("fibers", "baseline"):
        raise ConfigError(f"mode must be 'fibers' or 'baseline', got {mode!r}")
    if mode == "fibers" and config.mu_f > 0 and config.epochs_fiber > 0 \
            and problem.fiber_sampler is None:
        raise DataError("fiber mode needs fiber directions")
    t_start = time.perf_counter()
    with thread_limit(config):
        if net is None:
            net = init_network(config, problem)
        pixels = problem.pixel_points()
        ref_vals = problem.reference.flat().astype(np.float64)
        t0 = time.perf_counter()
        if pretrain:
            pre = pretrain_identity(net, pixels, problem.frame_times, config.pretrain_tol,
                                    config.pretrain_max_iter, config.lr, config.seed,
                                    config.pretrain_batch)
            if not pre.converged:
                log.warning("identity pre-training stopped at loss %.3e after %d iterations",
                            pre.loss, pre.iterations)
        else:
            pre = PretrainResult(True, identity_loss(net, pixels[:4096], problem.frame_times), 0)
        t_pre = time.perf_counter() - t0

        fixed = None if config.resample_spatial else fixed_spatial_sets(problem, config)
        state = AdamState.zeros(net.n_params)
        n_fr = problem.n_frames
        metrics = []
        epochs = config.epochs_baseline + config.epochs_fiber
        it = 0
        for epoch in range(epochs):
            fiber_phase = epoch >= config.epochs_baseline
            mu_f = config.mu_f if (fiber_phase and mode == "fibers") else 0.0
            te = time.perf_counter()
            acc = dict(data_loss=0.0, elastic_loss=0.0, fiber_loss=0.0, total=0.0)
            barrier = 0
            for k in range(n_fr):
                if config.n_pixels is None or config.n_pixels >= len(pixels):
                    X, R = pixels, ref_vals
                else:
                    prng = np.random.default_rng([config.seed, STREAM_PIXELS, it])
                    idx = prng.choice(len(pixels), config.n_pixels, replace=False)
                    X, R = pixels[idx], ref_vals[idx]
                u, _, cache = net.evaluate(problem.frame_times[k], X)
                if not np.all(np.isfinite(u)):
                    _abort(net, snapshot_dir, epoch, it, dict(data_loss=float("nan")))
                d_loss, gu = data_term(u.astype(np.float64), X, R, problem.frames[k], config.p)
                grad = net.backward(cache, grad_u=gu)
                batch = sample_collocation(problem, config, it, fixed, with_fibers=mu_f > 0)
                e_loss, f_loss, bad, g_reg = regularizer_step(net, batch, config, mu_f)
                grad += g_reg
                total = d_loss + config.mu * e_loss + f_loss
                if not (np.isfinite(total) and np.all(np.isfinite(grad))):
                    _abort(net, snapshot_dir, epoch, it, dict(
                        data_loss=d_loss, elastic_loss=e_loss, fiber_loss=f_loss))
                adam_step(net.theta, grad, state, config.lr)
                acc["data_loss"] += d_loss
                acc["elastic_loss"] += config.mu * e_loss
                acc["fiber_loss"] += f_loss
                acc["total"] += total
                barrier += bad
                it += 1
            row = {k: v / n_fr for k, v in acc.items()}
            row["epoch"] = epoch
            row["j_barrier_count"] = barrier
            row["seconds"] = time.perf_counter() - te
            metrics.append(row)
            if progress is not None:
                progress(row)
            if config.log_every and (epoch % config.log_every == 0 or epoch == epochs - 1):
                log.info("epoch %d data %.4e elastic %.4e fiber %.4e barrier %d",
                         epoch, row["data_loss"], row["elastic_loss"], row["fiber_loss"], barrier)
    timings = dict(pretrain=t_pre, total=time.perf_counter() - t_start)
    return TrainResult(net, metrics, pre, timings, mode)


def deterministic_metrics(rows, deterministic: bool) -> list:
    """Rows as written to disk: wall times are zeroed in deterministic mode
    (they live in the run manifest instead) so reruns are byte-identical."""
    if not deterministic:
        return rows
    return [dict(r, seconds=0.0) for r in rows]
