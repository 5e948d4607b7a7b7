"""Decreasing-step Euler chain, its continuous interpolation, tangent process
and the Bismut-Elworthy-Li gradient estimator.

The chain is

    X_{n+1} = X_n + gamma_{n+1} b(X_n) + sigma(X_n) (W_{Gamma_{n+1}} - W_{Gamma_n}).

Paths are simulated in vectorized chunks.  Path ``i`` always draws its
Brownian increments from stream ``i`` of the master seed (see
:mod:`langstep.noise`), so results do not depend on chunking or threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .noise import NoiseSource, gaussian_block

__all__ = [
    "ChainState",
    "BlowUpError",
    "euler_step",
    "genuine_value",
    "WeightedEmpiricalMeasure",
    "accumulate_empirical",
    "TangentState",
    "tangent_step",
    "Observer",
    "EmpiricalMeasureRecorder",
    "MomentTracker",
    "simulate",
    "SimulationResult",
    "run_chain",
    "FineEuler",
    "ExactOU",
    "ou_exact_step",
    "bel_gradient",
    "BelResult",
    "worker_count",
    "invariant_start",
]

#: Seed offset for auxiliary noise: counter 0 draws random starts, counter
#: n feeds the exact-OU companion at step n.
AUX_SEED_SALT = 0x9E3779B97F4A7C15


class BlowUpError(RuntimeError):
    """A path reached a non-finite state."""

    def __init__(self, n, x, path=None):
        self.n = n
        self.x = np.asarray(x)
        self.path = path
        where = f" on path {path}" if path is not None else ""
        super().__init__(f"non-finite state at step {n}{where} (state before step: {self.x.tolist()})")


@dataclass(frozen=True)
class ChainState:
    """Position ``x`` after ``n`` steps, at model time ``elapsed = Gamma_n``."""

    x: np.ndarray
    n: int = 0
    elapsed: float = 0.0


def _as_point(x, d=None):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if d is not None and x.shape[-1] != d:
        raise ValueError(f"state has dimension {x.shape[-1]}, model expects {d}")
    return x


def _increment(model, x, dW, sigma_const=None):
    if sigma_const is not None:
        return dW @ sigma_const.T
    return np.einsum("...ij,...j->...i", model.sigma(x), dW)


def _const_sigma(model):
    if model.additive:
        return np.array(model.sigma(np.zeros(model.d)), dtype=float)
    return None


def euler_step(state, model, gamma, dW):
    """One Euler step of size ``gamma``; ``dW`` is the Brownian increment.

    ``dW`` must already carry the sqrt(gamma) scaling.
    """
    if not gamma > 0:
        raise ValueError(f"step must be positive, got {gamma!r}")
    x = _as_point(state.x, model.d)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    with np.errstate(all="ignore"):
        x_new = x + gamma * model.b(x) + _increment(model, x, dW)
    if not np.all(np.isfinite(x_new)):
        raise BlowUpError(state.n + 1, x)
    return ChainState(x_new, state.n + 1, state.elapsed + gamma)


def genuine_value(state, model, gamma, dW, t_offset, bridge_noise=None):
    """Continuous Euler interpolation at ``Gamma_n + t_offset`` inside a step.

    The Brownian value at ``t_offset`` is drawn from the bridge pinned to
    ``dW`` at ``gamma`` using the standard normal vector ``bridge_noise``.
    The two endpoints are returned without touching ``bridge_noise``.
    """
    if not 0.0 <= t_offset <= gamma:
        raise ValueError(f"t_offset must lie in [0, {gamma}], got {t_offset}")
    x = _as_point(state.x, model.d)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if t_offset == 0.0:
        return x.copy()
    if t_offset == gamma:
        return euler_step(state, model, gamma, dW).x
    if bridge_noise is None:
        raise ValueError("bridge_noise is required strictly inside the step")
    frac = t_offset / gamma
    w = frac * dW + math.sqrt(t_offset * (gamma - t_offset) / gamma) * np.asarray(bridge_noise, float)
    return x + t_offset * model.b(x) + _increment(model, x, w)


# ----------------------------------------------------------------------
# Weighted empirical measure
# ----------------------------------------------------------------------


class WeightedEmpiricalMeasure:
    """Occupation measure (1/Gamma_n) sum_k gamma_k delta_{X_{k-1}}.

    Weights are kept separately and totals are exact (``math.fsum``) so
    that the integral of the constant 1 is exactly 1.
    """

    def __init__(self, d):
        self.d = d
        self._points = []
        self._weights = []
        self._total = 0.0
        self._dirty = False

    def add(self, x, weight):
        if not weight > 0:
            raise ValueError("weights must be positive")
        self._points.append(_as_point(x, self.d).copy())
        self._weights.append(float(weight))
        self._dirty = True

    def extend(self, points, weights):
        points = np.asarray(points, float).reshape(-1, self.d)
        weights = np.asarray(weights, float).ravel()
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        self._points.extend(points)
        self._weights.extend(weights.tolist())
        self._dirty = True

    def __len__(self):
        return len(self._weights)

    @property
    def total_weight(self):
        if self._dirty:
            self._total = math.fsum(self._weights)
            self._dirty = False
        return self._total

    @property
    def points(self):
        return np.array(self._points).reshape(-1, self.d)

    @property
    def weights(self):
        return np.array(self._weights)

    def integrate(self, f):
        """Integral of ``f`` (vectorized over points) against the measure."""
        if not self._weights:
            raise ValueError("empty measure")
        vals = np.asarray(f(self.points), dtype=float).reshape(len(self), -1)
        w = self.weights
        out = [math.fsum(w * vals[:, j]) / self.total_weight for j in range(vals.shape[1])]
        return out[0] if len(out) == 1 else np.array(out)

    def mean(self):
        return np.atleast_1d(self.integrate(lambda p: p))

    def normalized_weights(self):
        return self.weights / self.total_weight


def accumulate_empirical(measure, x_before, gamma):
    """Add the pre-step position with the weight of the step about to be taken."""
    measure.add(x_before, gamma)
    return measure


# ----------------------------------------------------------------------
# Tangent process
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TangentState:
    Y: np.ndarray

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))

    @property
    def det(self):
        return float(np.linalg.det(self.Y))


def _tangent_update(model, x, Y, dt, dW):
    Jb = model.b_jacobian(x)
    Js = model.sigma_jacobian(x)  # (..., d, q, d)
    # sum_j grad(sigma_.j) dW^j, a (..., d, d) matrix
    M = dt * Jb + np.einsum("...ijk,...j->...ik", Js, dW)
    return Y + M @ Y


def tangent_step(Y, model, x, dt, dW):
    """Euler step of dY = grad b(X) Y dt + sum_j grad sigma_.j(X) Y dW^j."""
    Ym = Y.Y if isinstance(Y, TangentState) else np.asarray(Y, float)
    x = _as_point(x, model.d)
    dW = np.atleast_1d(np.asarray(dW, float))
    return TangentState(_tangent_update(model, x, Ym, dt, dW))


# ----------------------------------------------------------------------
# Observers
# ----------------------------------------------------------------------


class Observer:
    """Per-step hook.  ``fork`` gives a chunk-local copy, ``merge`` joins them
    back in stream order."""

    def fork(self, streams, x0):
        return self

    def step(self, n, x_prev, x_new, gamma):
        pass

    def merge(self, parts):
        pass


class EmpiricalMeasureRecorder(Observer):
    """Weighted empirical measure of each path (selected streams only)."""

    def __init__(self, d, streams=None):
        self.d = d
        self.select = None if streams is None else set(int(s) for s in streams)
        self.measures = {}

    def fork(self, streams, x0):
        part = EmpiricalMeasureRecorder(self.d)
        part._cols = [i for i, s in enumerate(streams) if self.select is None or int(s) in self.select]
        part._streams = [int(streams[i]) for i in part._cols]
        part._pts = []
        part._w = []
        return part

    def step(self, n, x_prev, x_new, gamma):
        self._pts.append(x_prev[self._cols].copy())
        self._w.append(gamma)

    def merge(self, parts):
        for part in parts:
            if not part._pts:
                pts = np.empty((0, len(part._streams), self.d))
            else:
                pts = np.stack(part._pts)
            for j, s in enumerate(part._streams):
                m = WeightedEmpiricalMeasure(self.d)
                m.extend(pts[:, j, :], part._w)
                self.measures[s] = m


class MomentTracker(Observer):
    """Cross-path averages of V(X)**a at checkpoints (step indices)."""

    def __init__(self, V, exponents, checkpoints):
        self.V = V
        self.exponents = np.atleast_1d(np.asarray(exponents, float))
        self.checkpoints = sorted(int(c) for c in checkpoints)
        self._sums = None
        self._count = 0
        self.initial = None

    def fork(self, streams, x0):
        part = MomentTracker(self.V, self.exponents, self.checkpoints)
        part._set = set(self.checkpoints)
        part._sums = {}
        part._count = len(streams)
        part._x0 = x0
        if 0 in part._set:
            part._record(0, x0)
        return part

    def _record(self, n, x):
        v = np.asarray(self.V(x), float)
        self._sums[n] = np.array([math.fsum(v**a) for a in self.exponents])

    def step(self, n, x_prev, x_new, gamma):
        if n in self._set:
            self._record(n, x_new)

    def merge(self, parts):
        total = sum(p._count for p in parts)
        self._count = total
        self.means = {}
        for n in self.checkpoints:
            acc = np.zeros(self.exponents.size)
            for p in parts:
                if n in p._sums:
                    acc += p._sums[n]
            self.means[n] = acc / total
        if parts:
            self.initial = np.asarray(self.V(parts[0]._x0[:1]), float)[0] ** self.exponents

    def series(self):
        """Array with one row per checkpoint: ``n, mean V**a for each a``."""
        return np.array([[n, *self.means[n]] for n in self.checkpoints])


# ----------------------------------------------------------------------
# Companion chains sharing the Brownian path
# ----------------------------------------------------------------------


class FineEuler:
    """Euler chain on a grid ``refine`` times finer, fed the fine increments."""

    aux = False

    def __init__(self, model, refine):
        if refine < 1:
            raise ValueError("refine must be >= 1")
        self.model = model
        self.refine = int(refine)
        self.sigma_const = _const_sigma(model)

    def init(self, x0, seed, streams):
        return x0.copy()

    def advance(self, y, gamma, fine_dW, aux_z=None):
        h = gamma / self.refine
        for j in range(self.refine):
            y = y + h * self.model.b(y) + _increment(self.model, y, fine_dW[j], self.sigma_const)
        return y


# Taylor coefficients (highest first) of [Var(I) - gamma cov_ratio^2] / (gamma u^2)
_RESID_SERIES = tuple(reversed((
    1 / 12, -1 / 12, 17 / 360, -7 / 360, 43 / 6720, -107 / 60480, 769 / 1814400,
    -163 / 1814400, 4097 / 239500800, -709 / 239500800, 6827 / 14529715200,
    -15019 / 217945728000,
)))


def ou_exact_step(x, alpha, sigma, gamma, dW, z):
    """Exact OU transition over ``gamma`` jointly with its Brownian increment.

    ``dW`` is the increment over the step and ``z`` an independent standard
    normal; ``int_0^gamma e^{-alpha(gamma-s)} dW_s`` is reconstructed from
    the pair with the correct joint covariance.
    """
    u = alpha * gamma
    cov_ratio = -math.expm1(-u) / u  # Cov(I, dW) / Var(dW)
    if u < 0.1:
        # series of Var(I) - gamma cov_ratio^2, which cancels badly for small u
        poly = 0.0
        for c in _RESID_SERIES:
            poly = poly * u + c
        resid = gamma * u * u * poly
    else:
        resid = -math.expm1(-2 * u) / (2 * alpha) - gamma * cov_ratio**2
    integral = cov_ratio * dW + math.sqrt(max(resid, 0.0)) * z
    return math.exp(-u) * x + sigma * integral


class ExactOU:
    """Exact OU path started with the chain and driven by the same Brownian motion.

    Started from a draw of the invariant law (``x0="invariant"`` in
    :func:`simulate`) its marginal is exactly invariant at every step.
    """

    aux = True

    def __init__(self, alpha, sigma):
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self.refine = 1

    def init(self, x0, seed, streams):
        return x0.copy()

    def advance(self, y, gamma, fine_dW, aux_z):
        dW = fine_dW.sum(axis=0)
        return ou_exact_step(y, self.alpha, self.sigma, gamma, dW, aux_z)


# ----------------------------------------------------------------------
# Vectorized simulation
# ----------------------------------------------------------------------


def worker_count():
    """Thread cap from ``LANGSTEP_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("LANGSTEP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class SimulationResult:
    """Outcome of :func:`simulate`.

    ``snapshots[n]`` is the ``(n_paths, d)`` array of states after ``n``
    steps; ``companion[n]`` the same for the coupled companion chain.
    Dropped paths hold NaN and are flagged in ``dropped``.
    """

    final: np.ndarray
    n_steps: int
    elapsed: float
    snapshots: dict = field(default_factory=dict)
    companion: dict = field(default_factory=dict)
    dropped: np.ndarray = None
    streams: np.ndarray = None
    observers: tuple = ()

    @property
    def alive(self):
        return ~self.dropped

    def marginal(self, n, which="chain"):
        src = self.snapshots if which == "chain" else self.companion
        return src[n][self.alive]


def invariant_start(model, seed, streams):
    """One draw per stream from ``model.invariant`` (1-D models only).

    The draw is ``ppf(Phi(z))`` with ``z`` the auxiliary normal at counter 0.
    """
    if model.invariant is None:
        raise ValueError(f"model {model.name!r} has no known invariant law to start from")
    z = gaussian_block(seed ^ AUX_SEED_SALT, streams, 0, 1, 1)[0]
    return np.asarray(model.invariant.ppf(ndtr(z)), dtype=float).reshape(-1, 1)


def simulate(model, schedule, n_steps, x0, *, seed=0, n_paths=1, streams=None,
             checkpoints=(), observers=(), companion=None, on_blowup="abort",
             chunk_paths=4096, block_steps=2048, threads=None):
    """Simulate independent Euler paths of the decreasing-step scheme.

    Parameters
    ----------
    x0 : array_like or "invariant"
        Start point ``(d,)`` shared by all paths, ``(n_paths, d)``, or
        ``"invariant"`` for independent draws of the model's invariant law.
    checkpoints : iterable of int
        Step indices at which the whole path cloud is stored.
    companion : FineEuler or ExactOU, optional
        A second chain driven by the same Brownian path.  With a refinement
        factor ``m`` the noise is generated on the fine grid and the coarse
        increment is the sum of the ``m`` fine ones.
    on_blowup : {"abort", "drop"}
        Raise :class:`BlowUpError`, or mark the path as dropped and go on.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if on_blowup not in ("abort", "drop"):
        raise ValueError("on_blowup must be 'abort' or 'drop'")
    if streams is None:
        streams = np.arange(n_paths, dtype=np.int64)
    streams = np.asarray(streams, dtype=np.int64)
    n_paths = streams.size
    checkpoints = sorted(set(int(c) for c in checkpoints))
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > n_steps):
        raise ValueError(f"checkpoints must lie in [0, {n_steps}]")
    if isinstance(x0, str):
        if x0 != "invariant":
            raise ValueError(f"unknown start {x0!r}")
        x0 = invariant_start(model, seed, streams)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.broadcast_to(_as_point(x0, model.d), (n_paths, model.d))
    elif x0.shape != (n_paths, model.d):
        raise ValueError(f"x0 must have shape ({model.d},) or ({n_paths}, {model.d})")
    gammas = schedule.gammas(1, n_steps + 1)
    refine = companion.refine if companion is not None else 1

    chunks = [np.arange(i, min(i + chunk_paths, n_paths)) for i in range(0, n_paths, chunk_paths)]
    forks = [[ob.fork(streams[c], x0[c]) for ob in observers] for c in chunks]

    def work(ci):
        return _run_chunk(model, gammas, x0[chunks[ci]].copy(), seed, streams[chunks[ci]],
                          checkpoints, forks[ci], companion, refine, on_blowup, block_steps)

    nthreads = threads if threads is not None else worker_count()
    if nthreads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            outs = list(ex.map(work, range(len(chunks))))
    else:
        outs = [work(i) for i in range(len(chunks))]

    final = np.concatenate([o[0] for o in outs])
    dropped = np.concatenate([o[1] for o in outs])
    snaps = {n: np.concatenate([o[2][n] for o in outs]) for n in checkpoints}
    comp = {n: np.concatenate([o[3][n] for o in outs]) for n in checkpoints} if companion else {}
    for j, ob in enumerate(observers):
        ob.merge([f[j] for f in forks])
    return SimulationResult(
        final=final,
        n_steps=n_steps,
        elapsed=schedule.gamma_sum(n_steps),
        snapshots=snaps,
        companion=comp,
        dropped=dropped,
        streams=streams,
        observers=tuple(observers),
    )


def _run_chunk(model, gammas, x, seed, streams, checkpoints, observers, companion,
               refine, on_blowup, block_steps):
    P, d = x.shape
    q = model.q
    sigma_const = _const_sigma(model)
    dropped = np.zeros(P, dtype=bool)
    snaps, comp = {}, {}
    cps = set(checkpoints)
    y = companion.init(x, seed, streams) if companion is not None else None
    if 0 in cps:
        snaps[0] = x.copy()
        if companion is not None:
            comp[0] = y.copy()
    n_steps = gammas.size
    block = max(1, block_steps // refine)
    with np.errstate(all="ignore"):
        for start in range(0, n_steps, block):
            count = min(block, n_steps - start)
            Z = gaussian_block(seed, streams, start * refine, count * refine, q)
            Z = Z.reshape(count, refine, P, q)
            if companion is not None and companion.aux:
                # aux counter 0 is reserved for the companion's start draw
                Zaux = gaussian_block(seed ^ AUX_SEED_SALT, streams, start + 1, count, d)
            for k in range(count):
                n = start + k + 1
                g = gammas[n - 1]
                if refine == 1:
                    fine = Z[k] * math.sqrt(g)
                    dW = fine[0]
                else:
                    fine = Z[k] * math.sqrt(g / refine)
                    dW = fine.sum(axis=0)
                x_new = x + g * model.b(x) + _increment(model, x, dW, sigma_const)
                if not np.isfinite(x_new).all():
                    bad = ~np.isfinite(x_new).all(axis=1) & ~dropped
                    if on_blowup == "abort" and bad.any():
                        i = int(np.argmax(bad))
                        raise BlowUpError(n, x[i], path=int(streams[i]))
                    dropped |= bad
                    x_new[dropped] = np.nan
                for ob in observers:
                    ob.step(n, x, x_new, g)
                x = x_new
                if companion is not None:
                    y = companion.advance(y, g, fine, Zaux[k] if companion.aux else None)
                if n in cps:
                    snaps[n] = x.copy()
                    if companion is not None:
                        comp[n] = y.copy()
    return x, dropped, snaps, comp


def run_chain(model, schedule, n_steps, x0, noise, observers=()):
    """Run one path driven by ``noise`` (a :class:`NoiseSource`).

    Returns the final :class:`ChainState`; observers are updated in place.
    Step ``n`` consumes counter ``n - 1`` of the stream.
    """
    x0 = _as_point(x0, model.d)
    if n_steps == 0:
        for ob in observers:
            ob.merge([ob.fork(np.array([noise.stream]), x0[None, :])])
        return ChainState(x0.copy(), 0, 0.0)
    if noise.counter != 0:
        raise ValueError("run_chain expects a fresh NoiseSource (counter 0)")
    res = simulate(model, schedule, n_steps, x0, seed=noise.seed,
                   streams=[noise.stream], observers=observers)
    noise.counter += n_steps
    return ChainState(res.final[0], n_steps, schedule.gamma_sum(n_steps))


# ----------------------------------------------------------------------
# Bismut-Elworthy-Li gradient
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class BelResult:
    gradient: np.ndarray
    std_error: np.ndarray
    n_paths: int
    rejected: int


def _right_inverse(s):
    """sigma^T (sigma sigma^T)^{-1}, batched; also flags near-singular points."""
    A = s @ np.swapaxes(s, -1, -2)
    if A.shape[-1] == 1:
        a = A[..., 0, 0]
        bad = ~np.isfinite(a) | (a <= 1e-300)
        return s.swapaxes(-1, -2) / np.where(bad, 1.0, a)[..., None, None], bad
    cond = np.linalg.cond(A)
    bad = ~np.isfinite(cond) | (cond > 1e12)
    A_safe = np.where(bad[..., None, None], np.eye(A.shape[-1]), A)
    inv = np.swapaxes(s, -1, -2) @ np.linalg.inv(A_safe)
    return inv, bad


def bel_gradient(model, f, x, t, n_paths=10000, n_substeps=200, seed=0, chunk_paths=8192):
    """Monte Carlo estimate of grad_x E f(X_t^x) without differentiating ``f``.

    Uses E[f(X_t) (1/t) sum_k (sigma(X_k)^{-1} Y_k)^T dW_k] on a uniform grid
    of ``n_substeps`` Euler steps, with sigma^{-1} the right inverse.
    Paths visiting a point where sigma sigma^T is numerically singular are
    rejected; more than 1% rejections raises ``RuntimeError``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x = _as_point(x, model.d)
    d, q = model.d, model.q
    h = t / n_substeps
    sh = math.sqrt(h)
    sums = np.zeros(d)
    sq = np.zeros(d)
    rejected = 0
    accepted = 0
    for c0 in range(0, n_paths, chunk_paths):
        streams = np.arange(c0, min(c0 + chunk_paths, n_paths))
        P = streams.size
        X = np.broadcast_to(x, (P, d)).copy()
        Y = np.broadcast_to(np.eye(d), (P, d, d)).copy()
        H = np.zeros((P, d))
        bad = np.zeros(P, dtype=bool)
        Z = gaussian_block(seed, streams, 0, n_substeps, q)
        for k in range(n_substeps):
            dW = Z[k] * sh
            s = model.sigma(X)
            sinv, sing = _right_inverse(s)
            bad |= sing
            # (sigma^{-1} Y)^T dW
            H += np.einsum("pji,pj->pi", sinv @ Y, dW)
            Y = _tangent_update(model, X, Y, h, dW)
            X = X + h * model.b(X) + np.einsum("pij,pj->pi", s, dW)
        bad |= ~np.isfinite(X).all(axis=1) | ~np.isfinite(H).all(axis=1)
        fx = np.asarray(f(X), float).reshape(P)
        contrib = fx[:, None] * H / t
        ok = ~bad
        rejected += int(bad.sum())
        accepted += int(ok.sum())
        sums += contrib[ok].sum(axis=0)
        sq += (contrib[ok] ** 2).sum(axis=0)
    if rejected > 0.01 * n_paths:
        raise RuntimeError(
            f"{rejected} of {n_paths} paths met a singular diffusion matrix; "
            "the gradient weight is not defined"
        )
    mean = sums / accepted
    var = (sq / accepted - mean**2) * accepted / max(accepted - 1, 1)
    return BelResult(mean, np.sqrt(var / accepted), accepted, rejected)
