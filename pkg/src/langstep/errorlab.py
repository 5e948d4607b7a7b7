"""Measured convergence orders: one-step strong and weak errors of the Euler
step against coupled references, and long-run distance-to-target curves.

Fine references reuse the coarse path's noise: the increments are drawn on
the fine grid and the coarse increment is their sum, accumulated in a fixed
order.  OU models use the exact Gaussian transition instead of a fine grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import tv_histogram, w1_exact_1d, w1_sliced
from .noise import gaussian_block
from .scheme import AUX_SEED_SALT, ExactOU, FineEuler, _const_sigma, _increment, ou_exact_step, simulate

__all__ = [
    "RateFit",
    "rate_fit",
    "ErrorPoint",
    "one_step_strong_error",
    "one_step_weak_error",
    "strong_sweep",
    "weak_sweep",
    "LongRunResult",
    "long_run_rate_experiment",
    "default_burn_in",
]

#: Seed offset giving an independent reference in unpaired weak-error runs.
UNPAIRED_SALT = 0x5DEECE66D


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log scale, log error)``."""

    scales: tuple
    errors: tuple
    slope: float
    intercept: float
    r2: float

    def predict(self, scale):
        return math.exp(self.intercept) * scale**self.slope


def rate_fit(scales, errors=None):
    """Fit ``log error = intercept + slope * log scale``.

    Accepts either two sequences or a single sequence of ``(scale, error)``
    pairs.
    """
    if errors is None:
        pairs = list(scales)
        scales = [p[0] for p in pairs]
        errors = [p[1] for p in pairs]
    s = np.asarray(scales, dtype=float)
    e = np.asarray(errors, dtype=float)
    if s.shape != e.shape or s.ndim != 1:
        raise ValueError("scales and errors must be 1-D and of equal length")
    if s.size < 3:
        raise ValueError("a rate fit needs at least 3 points")
    if np.any(s <= 0) or np.any(e <= 0) or not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
        raise ValueError("scales and errors must be positive and finite")
    ls, le = np.log(s), np.log(e)
    A = np.column_stack([np.ones_like(ls), ls])
    (intercept, slope), *_ = np.linalg.lstsq(A, le, rcond=None)
    resid = le - (intercept + slope * ls)
    ss_tot = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(tuple(s.tolist()), tuple(e.tolist()), float(slope), float(intercept),
                   min(1.0, max(0.0, r2)))


@dataclass(frozen=True)
class ErrorPoint:
    gamma: float
    error: float
    std_error: float
    n_paths: int
    n_substeps: int
    reference: str
    bias_estimate: float | None = None
    inconclusive: bool = False

    def as_row(self):
        return {
            "gamma": self.gamma,
            "error": self.error,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "n_substeps": self.n_substeps,
            "reference": self.reference,
            "bias_estimate": self.bias_estimate,
            "inconclusive": self.inconclusive,
        }


def _reference_kind(model, reference):
    if reference == "auto":
        return "exact" if "ou" in model.meta else "fine"
    if reference == "exact" and "ou" not in model.meta:
        raise ValueError("an exact reference is only available for OU models")
    if reference not in ("exact", "fine"):
        raise ValueError(f"unknown reference {reference!r}")
    return reference


def _one_step_paths(model, x, gamma, levels, seed, streams, exact, block=256):
    """Coarse Euler end points plus references on nested fine grids.

    ``levels`` lists fine grid sizes, each dividing the largest one.  The
    noise lives on the finest grid; coarser grids sum consecutive
    increments.  Returns ``(coarse, {m: fine_m}, exact_or_None)``.
    """
    P = streams.size
    d, q = model.d, model.q
    m_max = max(levels)
    if any(m_max % m for m in levels):
        raise ValueError("fine grid sizes must divide the finest one")
    h = gamma / m_max
    sh = math.sqrt(h)
    sc = _const_sigma(model)
    X0 = np.broadcast_to(x, (P, d)).copy()
    fine = {m: X0.copy() for m in levels}
    acc = {m: np.zeros((P, q)) for m in levels}  # pending increment of each grid
    dW = np.zeros((P, q))
    for start in range(0, m_max, block):
        count = min(block, m_max - start)
        Z = gaussian_block(seed, streams, start, count, q)
        for k in range(count):
            inc = Z[k] * sh
            dW += inc
            j = start + k + 1
            for m in levels:
                acc[m] += inc
                r = m_max // m
                if j % r == 0:
                    y = fine[m]
                    fine[m] = y + (gamma / m) * model.b(y) + _increment(model, y, acc[m], sc)
                    acc[m] = np.zeros((P, q))
    coarse = X0 + gamma * model.b(X0) + _increment(model, X0, dW, sc)
    ex = None
    if exact:
        alpha, sigma = model.meta["ou"]
        z = gaussian_block(seed ^ AUX_SEED_SALT, streams, 0, 1, d)[0]
        ex = ou_exact_step(X0, alpha, sigma, gamma, dW, z)
    return coarse, fine, ex


def _chunks(n_paths, size):
    for c0 in range(0, n_paths, size):
        yield np.arange(c0, min(c0 + size, n_paths), dtype=np.int64)


def one_step_strong_error(model, x, gamma, p=2, n_paths=100_000, n_substeps=32, seed=0,
                          reference="auto", chunk_paths=20_000):
    """L^p distance between one Euler step and a coupled reference at time gamma.

    The reference is the exact transition for OU models and otherwise an
    Euler path on ``n_substeps`` sub-intervals of [0, gamma] fed the same
    Brownian increments.
    """
    if p not in (1, 2, 4):
        raise ValueError("p must be 1, 2 or 4")
    if n_substeps < 32:
        raise ValueError("the fine reference needs n_substeps >= 32")
    kind = _reference_kind(model, reference)
    x = np.atleast_1d(np.asarray(x, float))
    vals = []
    for streams in _chunks(n_paths, chunk_paths):
        coarse, fine, ex = _one_step_paths(model, x, gamma, [n_substeps], seed, streams, kind == "exact")
        ref = ex if kind == "exact" else fine[n_substeps]
        vals.append(np.linalg.norm(ref - coarse, axis=1) ** p)
    v = np.concatenate(vals)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite one-step error")
    m = float(v.mean())
    se_m = float(v.std(ddof=1) / math.sqrt(v.size))
    err = m ** (1.0 / p)
    se = se_m / (p * m ** ((p - 1.0) / p)) if m > 0 else 0.0
    return ErrorPoint(gamma, err, se, n_paths, n_substeps, kind)


def one_step_weak_error(model, g, x, gamma, n_paths=100_000, n_substeps=32, seed=0,
                        reference="auto", paired=True, max_substeps=2**14, chunk_paths=20_000):
    """|E g(coarse step) - E g(reference)| at time gamma.

    With a fine reference the grid doubles until the Richardson difference
    between ``m`` and ``2m`` sub-steps drops below 10% of the measured error;
    past ``max_substeps`` the point is flagged inconclusive.  ``paired=False``
    drives the reference with independent noise (for comparison only).
    """
    kind = _reference_kind(model, reference)
    x = np.atleast_1d(np.asarray(x, float))
    m = int(n_substeps)
    while True:
        levels = [m, 2 * m] if kind == "fine" else [m]
        diffs, rich = [], []
        for streams in _chunks(n_paths, chunk_paths):
            coarse, fine, ex = _one_step_paths(model, x, gamma, levels, seed, streams, kind == "exact")
            if kind == "exact":
                ref = ex
            else:
                ref = fine[2 * m]
                rich.append(np.asarray(g(fine[m]), float) - np.asarray(g(ref), float))
            if not paired:
                c2, f2, e2 = _one_step_paths(model, x, gamma, levels, seed ^ UNPAIRED_SALT, streams,
                                             kind == "exact")
                ref = e2 if kind == "exact" else f2[2 * m]
            diffs.append(np.asarray(g(coarse), float) - np.asarray(g(ref), float))
        dv = np.concatenate(diffs)
        err = abs(float(dv.mean()))
        se = float(dv.std(ddof=1) / math.sqrt(dv.size))
        if kind == "exact":
            return ErrorPoint(gamma, err, se, n_paths, 0, kind)
        bias = abs(float(np.concatenate(rich).mean()))
        if bias < 0.1 * err:
            return ErrorPoint(gamma, err, se, n_paths, 2 * m, kind, bias_estimate=bias)
        if 2 * m >= max_substeps:
            return ErrorPoint(gamma, err, se, n_paths, 2 * m, kind, bias_estimate=bias,
                              inconclusive=True)
        m *= 2


def strong_sweep(model, x, gammas, **kw):
    """Strong errors over a list of steps, with their rate fit."""
    points = [one_step_strong_error(model, x, g, **kw) for g in gammas]
    return points, rate_fit([pt.gamma for pt in points], [pt.error for pt in points])


def weak_sweep(model, g, x, gammas, **kw):
    """Weak errors over a list of steps, with their rate fit."""
    points = [one_step_weak_error(model, g, x, gm, **kw) for gm in gammas]
    return points, rate_fit([pt.gamma for pt in points], [pt.error for pt in points])


# ----------------------------------------------------------------------
# Long-run experiments
# ----------------------------------------------------------------------


def default_burn_in(model, schedule, checkpoints):
    """Time after which exp(-rho Gamma_n) is below the smallest checkpoint step."""
    rho = model.meta.get("rho") or 1.0
    g_min = min(schedule.gamma(n) for n in checkpoints if n >= 1)
    return math.log(1.0 / g_min) / rho


@dataclass
class LongRunResult:
    rows: list
    fit: RateFit | None
    burn_in_time: float
    target: str
    distance: str
    meta: dict = field(default_factory=dict)

    @property
    def fitted_rows(self):
        return [r for r in self.rows if r["fitted"]]

    @property
    def strictly_decreasing(self):
        """Whether the distance strictly decreases across the fitted checkpoints."""
        v = [r["value"] for r in self.fitted_rows]
        return all(b < a for a, b in zip(v, v[1:]))

    def table(self):
        """``(n, gamma_n, Gamma_n, value)`` rows as an array."""
        return np.array([[r["n"], r["gamma"], r["Gamma"], r["value"]] for r in self.rows])


def _distance(kind, a, b, seed, bins=None):
    if kind == "w1_exact_1d":
        return w1_exact_1d(a, b)
    if kind == "w1_sliced":
        return w1_sliced(a, b, seed=seed)
    if kind == "tv_histogram":
        return tv_histogram(a, b, bins=bins)
    raise ValueError(f"unknown distance {kind!r}")


def long_run_rate_experiment(model, schedule, checkpoints, n_paths=2000, target="auto",
                             distance="w1_exact_1d", seed=0, x0="invariant", t_burn=None,
                             refine=10, bins=None, on_blowup="abort", chunk_paths=4096):
    """Distance between the chain marginal and a target at each checkpoint.

    Targets
    -------
    ``"analytic"``
        the model's invariant law (independent of the chain; the estimate
        carries the sampling floor of ``n_paths`` points).
    ``"exact"``
        OU only: the exact OU path with the chain's start and Brownian path.
        With ``x0="invariant"`` its marginal is the invariant law itself.
    ``"reference"``
        an Euler chain on a grid ``refine`` times finer sharing the Brownian
        path; an approximation of the diffusion's law at the same time.

    The rate fit of distance against ``gamma_n`` uses the checkpoints with
    ``Gamma_n >= t_burn``.  Passing a list of distance names measures all of
    them on one simulation and returns ``{name: LongRunResult}``.
    """
    checkpoints = sorted(int(c) for c in checkpoints)
    if not checkpoints or checkpoints[0] < 1:
        raise ValueError("checkpoints must be positive step indices")
    if len(set(checkpoints)) != len(checkpoints):
        raise ValueError("checkpoints must be distinct")
    if schedule.length is not None and checkpoints[-1] > schedule.length:
        raise ValueError(f"checkpoint {checkpoints[-1]} beyond the schedule table")
    if target == "auto":
        target = "exact" if "ou" in model.meta else "reference"
    if target == "exact":
        if "ou" not in model.meta:
            raise ValueError("exact target requires an OU model")
        companion = ExactOU(*model.meta["ou"])
    elif target == "reference":
        companion = FineEuler(model, refine)
    elif target == "analytic":
        if model.invariant is None:
            raise ValueError("model has no analytic invariant law")
        companion = None
    else:
        raise ValueError(f"unknown target {target!r}")
    if t_burn is None:
        t_burn = default_burn_in(model, schedule, checkpoints)
    res = simulate(model, schedule, checkpoints[-1], x0, seed=seed, n_paths=n_paths,
                   checkpoints=checkpoints, companion=companion, on_blowup=on_blowup,
                   chunk_paths=chunk_paths)
    meta = {"n_paths": n_paths, "dropped": int(res.dropped.sum()), "varpi": schedule.varpi(),
            "rho": model.meta.get("rho"), "refine": refine if target == "reference" else None}
    names = [distance] if isinstance(distance, str) else list(distance)
    out = {}
    for name in names:
        rows = []
        for n in checkpoints:
            a = res.marginal(n)
            if a.shape[1] == 1:
                a = a[:, 0]
            if companion is None:
                b = model.invariant
            else:
                b = res.marginal(n, "companion")
                if b.shape[1] == 1:
                    b = b[:, 0]
            rep = _distance(name, a, b, seed, bins)
            G = schedule.gamma_sum(n)
            rows.append({
                "n": n,
                "gamma": schedule.gamma(n),
                "Gamma": G,
                "value": rep.value,
                "fitted": G >= t_burn,
                "alive": int(res.alive.sum()),
            })
        fitted = [r for r in rows if r["fitted"] and r["value"] > 0]
        fit = (rate_fit([r["gamma"] for r in fitted], [r["value"] for r in fitted])
               if len(fitted) >= 3 else None)
        out[name] = LongRunResult(rows, fit, t_burn, target, name, meta=dict(meta))
    return out[distance] if isinstance(distance, str) else out
