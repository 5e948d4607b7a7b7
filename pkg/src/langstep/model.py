"""Diffusion models dX = b(X) dt + sigma(X) dW, built-ins and assumption probes.

Every field function works on batches: ``drift`` maps ``(..., d)`` to
``(..., d)`` and ``diffusion`` maps ``(..., d)`` to ``(..., d, q)``.
Jacobians use the layout ``drift_jacobian: (..., d, d)`` with entry
``[i, k] = d b_i / d x_k`` and ``diffusion_jacobian: (..., d, q, d)`` with
entry ``[i, j, k] = d sigma_ij / d x_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

__all__ = [
    "DiffusionModel",
    "ModelError",
    "gibbs_drift",
    "ou",
    "heavy_tail",
    "gradient_langevin",
    "gibbs_multiplicative",
    "linear_multiplicative",
    "model_from_spec",
    "fd_step",
    "check_dissipativity",
    "check_ellipticity",
    "check_mean_reversion",
    "DissipativityReport",
    "EllipticityReport",
    "MeanReversionReport",
]


class ModelError(ValueError):
    """Raised on inconsistent model definitions or missing model data."""


def fd_step(x):
    """Central-difference step ``max(1e-5, 1e-5 |x|)``, one value per point."""
    x = np.asarray(x, dtype=float)
    return np.maximum(1e-5, 1e-5 * np.linalg.norm(x, axis=-1))


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """An Ito diffusion on R^d driven by a q-dimensional Brownian motion.

    ``meta`` carries known constants of built-in models: ``alpha`` (the
    uniform dissipativity constant), ``rho`` (the W1 contraction rate),
    ``sigma0_sq`` (the ellipticity bound), and ``ou`` = ``(alpha, sigma)`` for
    Ornstein-Uhlenbeck models whose exact transition is known.
    """

    d: int
    q: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Optional[Callable] = None
    diffusion_jacobian: Optional[Callable] = None
    lyapunov: Optional[Callable] = None
    lyapunov_grad: Optional[Callable] = None
    additive: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    invariant: Optional[object] = None

    def __post_init__(self):
        if self.d < 1 or self.q < 1:
            raise ModelError(f"dimensions must be positive, got d={self.d}, q={self.q}")

    # evaluation with shape checks --------------------------------------
    def b(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.drift(x), dtype=float)
        if out.shape != x.shape:
            raise ModelError(f"drift returned shape {out.shape}, expected {x.shape}")
        return out

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.diffusion(x), dtype=float)
        if out.shape != x.shape[:-1] + (self.d, self.q):
            raise ModelError(
                f"diffusion returned shape {out.shape}, expected {x.shape[:-1] + (self.d, self.q)}"
            )
        return out

    def b_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        if self.drift_jacobian is not None:
            return np.asarray(self.drift_jacobian(x), dtype=float)
        return _fd_jacobian(self.b, x)

    def sigma_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        if self.diffusion_jacobian is not None:
            return np.asarray(self.diffusion_jacobian(x), dtype=float)
        if self.additive:
            return np.zeros(x.shape[:-1] + (self.d, self.q, self.d))
        return _fd_jacobian(self.sigma, x)

    @property
    def has_lyapunov(self):
        return self.lyapunov is not None and self.lyapunov_grad is not None

    def describe(self):
        return {"name": self.name, "d": self.d, "q": self.q, **self.params}


def _fd_jacobian(fn, x):
    """Central differences of ``fn`` at each point of ``x``; derivative axis last."""
    d = x.shape[-1]
    h = fd_step(x)[..., None]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        fp = fn(x + h * e)
        fm = fn(x - h * e)
        hk = h.reshape(h.shape[:-1] + (1,) * (fp.ndim - x.ndim + 1))
        cols.append((fp - fm) / (2.0 * hk))
    return np.stack(cols, axis=-1)


# ----------------------------------------------------------------------
# Gibbs drift
# ----------------------------------------------------------------------


def gibbs_drift(grad_V, sigma_field, x, sigma_jacobian=None):
    """Drift making ``exp(-V)`` invariant for the diffusion coefficient ``sigma_field``.

    b = -1/2 (A grad V - div A),  A = sigma sigma^T,  (div A)_i = sum_j d_j A_ij.

    With ``sigma_jacobian`` (layout ``(..., d, q, d)``) the divergence is
    exact; otherwise ``A`` is differentiated by central differences.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    g = np.asarray(grad_V(x), dtype=float)
    if g.shape != x.shape:
        raise ModelError(f"grad_V returned shape {g.shape}, expected {x.shape}")
    s = np.asarray(sigma_field(x), dtype=float)
    if s.shape[:-1] != x.shape[:-1] + (d,):
        raise ModelError(f"sigma_field returned shape {s.shape} for dimension {d}")
    A = s @ np.swapaxes(s, -1, -2)
    Ag = np.einsum("...ij,...j->...i", A, g)
    if sigma_jacobian is not None:
        J = np.asarray(sigma_jacobian(x), dtype=float)
        # d_j A_ij = sum_k (d_j s_ik) s_jk + s_ik (d_j s_jk)
        div = np.einsum("...ikj,...jk->...i", J, s) + np.einsum("...ik,...jkj->...i", s, J)
    else:
        div = _fd_divergence(lambda y: _outer(sigma_field(y)), x)
    return -0.5 * (Ag - div)


def _outer(s):
    s = np.asarray(s, dtype=float)
    return s @ np.swapaxes(s, -1, -2)


def _fd_divergence(A_fn, x):
    d = x.shape[-1]
    h = fd_step(x)[..., None]
    div = np.zeros(x.shape)
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        Ap = A_fn(x + h * e)
        Am = A_fn(x - h * e)
        div += (Ap[..., :, j] - Am[..., :, j]) / (2.0 * h)
    return div


# ----------------------------------------------------------------------
# Built-in models
# ----------------------------------------------------------------------


def _norm_sq_plus_one(x):
    return 1.0 + np.sum(x * x, axis=-1)


def _quadratic_lyapunov():
    return (lambda x: _norm_sq_plus_one(np.asarray(x, float)), lambda x: 2.0 * np.asarray(x, float))


def ou(alpha=1.0, sigma=math.sqrt(2.0), d=1):
    """Centred Ornstein-Uhlenbeck process dX = -alpha X dt + sigma dW."""
    if not (alpha > 0 and sigma > 0):
        raise ModelError("OU needs alpha > 0 and sigma > 0")
    eye = np.eye(d)
    V, gV = _quadratic_lyapunov()
    return DiffusionModel(
        d=d,
        q=d,
        drift=lambda x: -alpha * np.asarray(x, float),
        diffusion=lambda x: np.broadcast_to(sigma * eye, np.shape(x)[:-1] + (d, d)),
        drift_jacobian=lambda x: np.broadcast_to(-alpha * eye, np.shape(x)[:-1] + (d, d)),
        diffusion_jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        lyapunov=V,
        lyapunov_grad=gV,
        additive=True,
        name="ou",
        params={"alpha": alpha, "sigma": sigma},
        meta={"alpha": alpha, "rho": alpha, "sigma0_sq": sigma**2, "ou": (alpha, sigma)},
        invariant=stats.norm(scale=sigma / math.sqrt(2 * alpha)) if d == 1 else None,
    )


def heavy_tail(d=1, kappa=1.0):
    """dX = -(d + kappa - 1) X dt + sqrt(1 + |X|^2) dW.

    Invariant density proportional to ``(1 + |x|^2)^-(d + kappa)``.
    """
    if not kappa > 0:
        raise ModelError("kappa must be positive")
    c = d + kappa - 1.0
    eye = np.eye(d)

    def diffusion(x):
        x = np.asarray(x, float)
        return np.sqrt(_norm_sq_plus_one(x))[..., None, None] * eye

    def diffusion_jacobian(x):
        x = np.asarray(x, float)
        r = np.sqrt(_norm_sq_plus_one(x))
        # d sigma_ij / d x_k = delta_ij x_k / r
        return eye[..., None] * (x / r[..., None])[..., None, None, :]

    def potential_grad(x):
        x = np.asarray(x, float)
        return 2.0 * (d + kappa) * x / _norm_sq_plus_one(x)[..., None]

    V, gV = _quadratic_lyapunov()
    contraction = c - d / 2.0
    invariant = None
    if d == 1:
        df = 2.0 * kappa + 1.0
        invariant = stats.t(df=df, scale=1.0 / math.sqrt(df))
    return DiffusionModel(
        d=d,
        q=d,
        drift=lambda x: -c * np.asarray(x, float),
        diffusion=diffusion,
        drift_jacobian=lambda x: np.broadcast_to(-c * eye, np.shape(x)[:-1] + (d, d)),
        diffusion_jacobian=diffusion_jacobian,
        lyapunov=V,
        lyapunov_grad=gV,
        name="heavytail",
        params={"d": d, "kappa": kappa},
        meta={
            "alpha": contraction,
            "rho": contraction if contraction > 0 else None,
            "sigma0_sq": 1.0,
            "potential": lambda x: (d + kappa) * np.log(_norm_sq_plus_one(np.asarray(x, float))) + 1.0,
            "potential_grad": potential_grad,
        },
        invariant=invariant,
    )


def gradient_langevin(grad_V, d, sigma=1.0, hess_V=None, lyapunov=None, lyapunov_grad=None):
    """Langevin diffusion dX = -sigma^2 grad V dt + sqrt(2) sigma dW."""
    if not sigma > 0:
        raise ModelError("sigma must be positive")
    eye = np.eye(d)
    s = math.sqrt(2.0) * sigma
    jac = None
    if hess_V is not None:
        jac = lambda x: -(sigma**2) * np.asarray(hess_V(x), float)
    return DiffusionModel(
        d=d,
        q=d,
        drift=lambda x: -(sigma**2) * np.asarray(grad_V(x), float),
        diffusion=lambda x: np.broadcast_to(s * eye, np.shape(x)[:-1] + (d, d)),
        drift_jacobian=jac,
        diffusion_jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (d, d, d)),
        lyapunov=lyapunov,
        lyapunov_grad=lyapunov_grad,
        additive=True,
        name="langevin",
        params={"sigma": sigma},
        meta={"sigma0_sq": 2.0 * sigma**2},
    )


def gibbs_multiplicative(grad_V, sigma_field, d, q=None, sigma_jacobian=None,
                         lyapunov=None, lyapunov_grad=None, meta=None):
    """Diffusion with coefficient ``sigma_field`` whose invariant law is ``exp(-V)``."""
    x0 = np.zeros(d)
    q = q if q is not None else np.asarray(sigma_field(x0)).shape[-1]
    return DiffusionModel(
        d=d,
        q=q,
        drift=lambda x: gibbs_drift(grad_V, sigma_field, x, sigma_jacobian),
        diffusion=lambda x: np.asarray(sigma_field(x), float),
        diffusion_jacobian=sigma_jacobian,
        lyapunov=lyapunov,
        lyapunov_grad=lyapunov_grad,
        name="gibbs",
        meta=dict(meta or {}),
    )


def linear_multiplicative(mu=-1.0, theta=0.5):
    """Scalar geometric model dX = mu X dt + theta X dW."""
    return DiffusionModel(
        d=1,
        q=1,
        drift=lambda x: mu * np.asarray(x, float),
        diffusion=lambda x: theta * np.asarray(x, float)[..., None],
        drift_jacobian=lambda x: np.full(np.shape(x) + (1,), mu),
        diffusion_jacobian=lambda x: np.full(np.shape(x) + (1, 1), theta),
        name="linear",
        params={"mu": mu, "theta": theta},
    )


_BUILTINS = {
    "ou": (ou, {"alpha": float, "sigma": float, "d": int}),
    "heavytail": (heavy_tail, {"d": int, "kappa": float}),
    "linear": (linear_multiplicative, {"mu": float, "theta": float}),
}


def model_from_spec(spec):
    """Build a built-in model from ``"tag:key=val,..."`` or ``{"name": tag, ...}``."""
    if isinstance(spec, DiffusionModel):
        return spec
    if isinstance(spec, str):
        tag, _, rest = spec.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, eq, val = item.partition("=")
            if not eq:
                raise ModelError(f"malformed model parameter {item!r} (expected key=value)")
            params[key.strip()] = val.strip()
    else:
        spec = dict(spec)
        tag = spec.pop("name", None)
        params = spec
    if tag not in _BUILTINS:
        raise ModelError(f"unknown model {tag!r}; built-ins are {sorted(_BUILTINS)}")
    factory, types = _BUILTINS[tag]
    kwargs = {}
    for key, val in params.items():
        if key not in types:
            raise ModelError(f"model {tag!r} has no parameter {key!r} (allowed: {sorted(types)})")
        kwargs[key] = types[key](val)
    return factory(**kwargs)


# ----------------------------------------------------------------------
# Assumption probes (sampling based: they can only exhibit violations)
# ----------------------------------------------------------------------


def _ball(rng, n, d, radius, inner=0.0):
    """Uniform points in the ball of ``radius``, restricted to ``|x| > inner``."""
    out = np.empty((0, d))
    while out.shape[0] < n:
        m = 2 * (n - out.shape[0]) + 16
        z = rng.standard_normal((m, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = radius * rng.random(m) ** (1.0 / d)
        pts = z * r[:, None]
        if inner > 0:
            pts = pts[r > inner]
        out = np.concatenate([out, pts])
    return out[:n]


@dataclass(frozen=True)
class DissipativityReport:
    estimate: float
    satisfied_at: Optional[float]
    sample_count: int
    radius: float
    outer_radius: Optional[float] = None
    empirical_only: bool = True


@dataclass(frozen=True)
class EllipticityReport:
    min_eigenvalue: float
    argmin: np.ndarray
    sample_count: int
    empirical_only: bool = True


@dataclass(frozen=True)
class MeanReversionReport:
    alpha: float
    beta: float
    worst_violation: float
    drift_bound: float
    sample_count: int
    empirical_only: bool = True


def check_dissipativity(model, sample_count=1000, radius=10.0, seed=0, outside=None):
    """Largest observed one-sided Lipschitz ratio over random pairs.

    r(x, y) = [(b(x) - b(y) | x - y) + 1/2 |sigma(x) - sigma(y)|_F^2] / |x - y|^2.

    A negative maximum ``-alpha`` is consistent with uniform dissipativity at
    rate ``alpha``.  With ``outside=R`` both points are drawn outside the
    ball of radius ``R``, which probes dissipativity outside a compact set.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    rng = np.random.default_rng(seed)
    inner = 0.0 if outside is None else float(outside)
    if inner >= radius:
        raise ValueError("outside radius must be smaller than the sampling radius")
    x = _ball(rng, sample_count, model.d, radius, inner)
    y = _ball(rng, sample_count, model.d, radius, inner)
    dist2 = np.sum((x - y) ** 2, axis=1)
    bad = dist2 == 0
    while np.any(bad):
        y[bad] = _ball(rng, int(bad.sum()), model.d, radius, inner)
        dist2 = np.sum((x - y) ** 2, axis=1)
        bad = dist2 == 0
    db = model.b(x) - model.b(y)
    ds = model.sigma(x) - model.sigma(y)
    num = np.sum(db * (x - y), axis=1) + 0.5 * np.sum(ds * ds, axis=(1, 2))
    est = float(np.max(num / dist2))
    return DissipativityReport(
        estimate=est,
        satisfied_at=-est if est < 0 else None,
        sample_count=sample_count,
        radius=float(radius),
        outer_radius=outside,
    )


def check_ellipticity(model, sample_count=1000, radius=10.0, seed=0):
    """Smallest eigenvalue of sigma sigma^T over random points of the ball."""
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    rng = np.random.default_rng(seed)
    x = _ball(rng, sample_count, model.d, radius)
    s = model.sigma(x)
    eig = np.linalg.eigvalsh(s @ np.swapaxes(s, -1, -2))[:, 0]
    i = int(np.argmin(eig))
    return EllipticityReport(float(eig[i]), x[i], sample_count)


def check_mean_reversion(model, sample_count=1000, radius=10.0, seed=0):
    """Fit (grad V | b) ~ beta - alpha V by least squares over random points.

    Also reports the worst violation of the fitted inequality and the
    drift growth constant ``max |b|^2 / V``.
    """
    if not model.has_lyapunov:
        raise ModelError("model has no Lyapunov function with gradient")
    rng = np.random.default_rng(seed)
    x = _ball(rng, sample_count, model.d, radius)
    V = np.asarray(model.lyapunov(x), float)
    if np.any(V <= 0):
        raise ModelError("Lyapunov function must be positive")
    b = model.b(x)
    y = np.sum(np.asarray(model.lyapunov_grad(x), float) * b, axis=1)
    design = np.column_stack([np.ones_like(V), -V])
    (beta, alpha), *_ = np.linalg.lstsq(design, y, rcond=None)
    worst = float(np.max(y - (beta - alpha * V)))
    return MeanReversionReport(
        alpha=float(alpha),
        beta=float(beta),
        worst_violation=worst,
        drift_bound=float(np.max(np.sum(b * b, axis=1) / V)),
        sample_count=sample_count,
    )
