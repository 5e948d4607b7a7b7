"""Distances between empirical and analytic laws, and moment diagnostics.

Total variation follows the mass-2 convention: ``|mu - nu|_TV`` is the
supremum of ``int f d(mu - nu)`` over ``|f| <= 1``, so it ranges in [0, 2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

__all__ = [
    "DistanceReport",
    "w1_exact_1d",
    "w1_sliced",
    "tv_histogram",
    "tv_gaussian_1d",
    "devroye_lower_bound",
    "moment_track",
    "MomentReport",
    "is_analytic",
]

TV_CONVENTION = "sup |int f d(mu-nu)|, |f|<=1 (range [0,2])"

# Gauss-Legendre nodes on [0, 1] for the empirical-vs-analytic CDF integral
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True)
class DistanceReport:
    value: float
    estimator: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise ValueError(f"distance must be finite and non-negative, got {self.value}")

    def __float__(self):
        return float(self.value)

    def as_row(self):
        row = {"estimator": self.estimator, "value": self.value}
        row.update(self.meta)
        if self.estimator.startswith("tv"):
            row["convention"] = TV_CONVENTION
        return row


def is_analytic(obj):
    return hasattr(obj, "ppf") and hasattr(obj, "cdf")


def _weighted_1d(obj):
    """Sorted atoms and normalized weights of a 1-D sample description."""
    if hasattr(obj, "points") and hasattr(obj, "weights"):
        pts, w = obj.points, obj.weights
    elif isinstance(obj, tuple) and len(obj) == 2:
        pts, w = obj
    else:
        pts, w = obj, None
    x = np.asarray(pts, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 1:
        raise ValueError(f"expected 1-D samples, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty sample set")
    if w is None:
        w = np.full(x.size, 1.0 / x.size)
    else:
        w = np.asarray(w, dtype=float).ravel()
        if w.shape != x.shape:
            raise ValueError("weights and samples differ in length")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        w = w / w.sum()
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    order = np.argsort(x, kind="stable")
    return x[order], w[order]


def _w1_empirical(xa, wa, xb, wb):
    """Integral of |Q_A - Q_B| over merged quantile breakpoints."""
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    u = np.union1d(ca, cb)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - 0.5 * du
    ia = np.minimum(np.searchsorted(ca, mid, side="left"), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mid, side="left"), xb.size - 1)
    return float(np.sum(np.abs(xa[ia] - xb[ib]) * du))


def _w1_empirical_analytic(x, w, dist):
    """Integral of |F_A - F_B| dx with F_A a step CDF and F_B analytic."""
    # tails: int_{-inf}^{x_1} F_B and int_{x_N}^{inf} (1 - F_B)
    lo = integrate.quad(dist.cdf, -np.inf, x[0], epsabs=1e-13, limit=200)[0]
    hi = integrate.quad(dist.sf, x[-1], np.inf, epsabs=1e-13, limit=200)[0]
    if x.size == 1:
        return lo + hi
    c = np.cumsum(w)[:-1]  # F_A on [x_i, x_{i+1})
    a, b = x[:-1], x[1:]
    keep = b > a
    a, b, c = a[keep], b[keep], c[keep]
    # split each interval where F_B crosses the constant level
    cross = np.clip(dist.ppf(c), a, b)
    scale = float(dist.ppf(0.75) - dist.ppf(0.25))
    total = 0.0
    for left, right in ((a, cross), (cross, b)):
        width = right - left
        wide = width > 0.05 * scale
        nodes = left[~wide, None] + width[~wide, None] * _GL_X
        vals = np.abs(c[~wide, None] - dist.cdf(nodes))
        total += float(np.sum(width[~wide] * (vals @ _GL_W)))
        for l, r, level in zip(left[wide], right[wide], c[wide]):
            total += integrate.quad(lambda t: abs(level - dist.cdf(t)), l, r, epsabs=1e-13)[0]
    return lo + hi + total


def w1_exact_1d(A, B):
    """Wasserstein-1 distance between two 1-D laws.

    ``A`` and ``B`` may be sample arrays, ``(samples, weights)`` tuples,
    weighted empirical measures, or frozen scipy distributions.  Two
    empirical inputs give the exact value of the quantile coupling; an
    analytic side is handled by quadrature of ``|F_A - F_B|``.
    """
    if is_analytic(A) and is_analytic(B):
        val = integrate.quad(lambda u: abs(A.ppf(u) - B.ppf(u)), 0.0, 1.0,
                             points=[0.5], epsabs=1e-12, limit=400)[0]
        meta = {"sides": "analytic/analytic"}
    elif is_analytic(A) or is_analytic(B):
        dist, emp = (A, B) if is_analytic(A) else (B, A)
        x, w = _weighted_1d(emp)
        val = _w1_empirical_analytic(x, w, dist)
        meta = {"sides": "empirical/analytic", "n": int(x.size)}
    else:
        xa, wa = _weighted_1d(A)
        xb, wb = _weighted_1d(B)
        val = _w1_empirical(xa, wa, xb, wb)
        meta = {"sides": "empirical/empirical", "n_a": int(xa.size), "n_b": int(xb.size)}
    return DistanceReport(max(val, 0.0), "w1_exact_1d", meta)


def _points_weights(obj):
    if hasattr(obj, "points") and hasattr(obj, "weights"):
        return np.asarray(obj.points, float), np.asarray(obj.weights, float)
    if isinstance(obj, tuple) and len(obj) == 2:
        return np.asarray(obj[0], float), np.asarray(obj[1], float)
    return np.asarray(obj, float), None


def w1_sliced(A, B, n_projections=200, seed=0):
    """Average 1-D W1 over random unit directions (not an estimate of W1)."""
    pa, wa = _points_weights(A)
    pb, wb = _points_weights(B)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("empty sample set")
    if pa.ndim != 2 or pb.ndim != 2 or pa.shape[1] != pb.shape[1]:
        raise ValueError("sliced W1 needs two (n, d) sample arrays of equal d")
    d = pa.shape[1]
    if d < 2:
        raise ValueError("sliced W1 needs d >= 2; use w1_exact_1d")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = np.empty(n_projections)
    for i, u in enumerate(dirs):
        a = pa @ u
        b = pb @ u
        vals[i] = w1_exact_1d(a if wa is None else (a, wa), b if wb is None else (b, wb)).value
    return DistanceReport(float(vals.mean()), "w1_sliced",
                          {"projections": n_projections, "seed": seed,
                           "std_error": float(vals.std(ddof=1) / math.sqrt(n_projections))
                           if n_projections > 1 else None})


def _default_range(pooled):
    lo, hi = np.quantile(pooled, [0.001, 0.999], axis=0)
    pad = 0.1 * (hi - lo)
    pad = np.where(pad > 0, pad, 1.0)
    return np.stack([lo - pad, hi + pad], axis=-1)


def _bin_index(x, edges):
    """0 for underflow, 1..bins for regular bins, bins+1 for overflow."""
    return np.searchsorted(edges, x, side="right")


def tv_histogram(A, B, bins=None, range=None):
    """Sum over bins of |p_i - q_i| for normalized histograms on a common grid.

    Two overflow bins catch the mass outside ``range``.  If ``B`` is a
    frozen scipy distribution (1-D only), its bin probabilities come from
    CDF differences instead of a second sample.
    """
    xa = np.asarray(A, dtype=float)
    if xa.ndim == 1:
        xa = xa[:, None]
    if xa.shape[0] == 0:
        raise ValueError("empty sample set")
    d = xa.shape[1]
    analytic = is_analytic(B)
    if analytic:
        if d != 1:
            raise ValueError("analytic reference only supported in 1-D")
        xb = None
        n_min = xa.shape[0]
    else:
        xb = np.asarray(B, dtype=float)
        if xb.ndim == 1:
            xb = xb[:, None]
        if xb.shape[0] == 0:
            raise ValueError("empty sample set")
        if xb.shape[1] != d:
            raise ValueError("samples differ in dimension")
        n_min = min(xa.shape[0], xb.shape[0])
    if bins is None:
        bins = int(math.ceil(n_min ** (1.0 / 3.0)))
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if range is None:
        pooled = xa if xb is None else np.concatenate([xa, xb])
        rng_ = _default_range(pooled)
    else:
        rng_ = np.asarray(range, dtype=float).reshape(d, 2)
    edges = [np.linspace(lo, hi, bins + 1) for lo, hi in rng_]
    nb = bins + 2

    def hist(x):
        idx = np.zeros(x.shape[0], dtype=np.int64)
        for k in np.arange(d):
            idx = idx * nb + _bin_index(x[:, k], edges[k])
        return np.bincount(idx, minlength=nb**d) / x.shape[0]

    p = hist(xa)
    if analytic:
        cdf = np.concatenate([[0.0], B.cdf(edges[0]), [1.0]])
        q = np.diff(cdf)
    else:
        q = hist(xb)
    val = float(np.sum(np.abs(p - q)))
    return DistanceReport(min(val, 2.0), "tv_histogram",
                          {"bins": bins, "range": rng_.tolist(),
                           "reference": "analytic" if analytic else "sample"})


def tv_gaussian_1d(s1, s2):
    """Integral of |phi_{0,s1} - phi_{0,s2}| (mass-2 convention) by quadrature."""
    if not (s1 > 0 and s2 > 0):
        raise ValueError("scales must be positive")
    if s1 == s2:
        return 0.0
    lo, hi = sorted((float(s1), float(s2)))
    # the densities cross at +-x_c
    xc = lo * hi * math.sqrt(2.0 * math.log(hi / lo) / (hi * hi - lo * lo))
    f = lambda x: abs(stats.norm.pdf(x, scale=lo) - stats.norm.pdf(x, scale=hi))
    # break points on both scales so quad sees each density's bulk
    cuts = sorted({0.0, xc, *(k * lo for k in (1, 4, 8, 16, 40)), *(k * hi for k in (1, 4, 8, 16, 40))})
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        total += integrate.quad(f, a, b, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return min(2.0, 2.0 * total)


def devroye_lower_bound(var_n, var_inf):
    """(1/200) min(1, |1 - var_n / var_inf|), a TV lower bound between centred Gaussians."""
    if not var_inf > 0:
        raise ValueError("reference variance must be positive")
    if var_n < 0:
        raise ValueError("variance must be non-negative")
    return min(1.0, abs(1.0 - var_n / var_inf)) / 200.0


@dataclass(frozen=True)
class MomentReport:
    checkpoints: np.ndarray
    exponents: np.ndarray
    means: np.ndarray  # (len(checkpoints), len(exponents))
    initial: np.ndarray
    threshold: float
    flagged: list

    def rows(self):
        return [[int(n), *m] for n, m in zip(self.checkpoints, self.means)]


def moment_track(model, schedule, x0, checkpoints, exponents=(1.0,), V=None,
                 n_paths=1000, seed=0, K=1e3):
    """Cross-path averages of V(X_n)**a at checkpoints.

    Checkpoints whose average exceeds ``K * V(x0)**a`` are flagged.
    """
    from .scheme import MomentTracker, simulate

    V = V if V is not None else model.lyapunov
    if V is None:
        raise ValueError("a Lyapunov function is required")
    checkpoints = sorted(int(c) for c in checkpoints)
    tracker = MomentTracker(V, exponents, checkpoints)
    simulate(model, schedule, checkpoints[-1] if checkpoints else 0, x0,
             seed=seed, n_paths=n_paths, observers=[tracker])
    x0 = np.atleast_1d(np.asarray(x0, float))
    init = float(np.asarray(V(x0[None, :]), float)[0]) ** tracker.exponents
    means = np.array([tracker.means[n] for n in checkpoints]).reshape(len(checkpoints), -1)
    limit = K * init
    flagged = [(int(n), float(a)) for n, row in zip(checkpoints, means)
               for a, m, lim in zip(tracker.exponents, row, limit) if m > lim]
    return MomentReport(np.array(checkpoints), tracker.exponents, means, init, K, flagged)
