"""Closed-form laws of the centred OU process and of its decreasing-step Euler chain."""

from __future__ import annotations

import math
import threading

import numpy as np

from .metrics import devroye_lower_bound

__all__ = ["OuOracle", "exact_marginal_variance"]

_E_ABS_Z = math.sqrt(2.0 / math.pi)


def exact_marginal_variance(alpha, sigma, t):
    """Var X_t = sigma^2 / (2 alpha) (1 - exp(-2 alpha t)) for X_0 = 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return -(sigma**2) / (2.0 * alpha) * math.expm1(-2.0 * alpha * t)


class OuOracle:
    """Exact variance of the Euler chain for dX = -alpha X dt + sigma dW.

    The chain X_{n+1} = X_n (1 - alpha gamma_{n+1}) + sigma dW stays
    Gaussian, with variance following

        s_{n+1} = s_n (1 - alpha gamma_{n+1})^2 + sigma^2 gamma_{n+1},

    started from ``initial_variance`` (0 for a chain started at 0).
    """

    def __init__(self, alpha, sigma, schedule, initial_variance=0.0):
        if not (alpha > 0 and sigma > 0):
            raise ValueError("alpha and sigma must be positive")
        if initial_variance < 0:
            raise ValueError("initial variance must be non-negative")
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self.schedule = schedule
        self._var = np.array([float(initial_variance)])
        self._lock = threading.Lock()

    @property
    def invariant_variance(self):
        return self.sigma**2 / (2.0 * self.alpha)

    def variance_recursion(self, n):
        """sigma_n^2 after ``n`` steps."""
        if n < 0:
            raise ValueError("n must be non-negative")
        self._build(n)
        return float(self._var[n])

    def variances(self, stop):
        """Array of sigma_k^2 for ``0 <= k < stop``."""
        self._build(stop - 1)
        return self._var[:stop].copy()

    def _build(self, n):
        if n < self._var.size:
            return
        with self._lock:
            have = self._var.size - 1
            if n <= have:
                return
            target = max(n, 2 * have)
            if self.schedule.length is not None:
                target = min(target, self.schedule.length)
                if n > target:
                    raise IndexError(f"step {n} beyond the schedule table")
            g = self.schedule.gammas(have + 1, target + 1)
            out = np.empty(target + 1)
            out[: have + 1] = self._var
            s = out[have]
            a, s2 = self.alpha, self.sigma**2
            for i, gk in enumerate(g.tolist(), start=have + 1):
                f = 1.0 - a * gk
                s = s * f * f + s2 * gk
                out[i] = s
            self._var = out

    def exact_w1_to_invariant(self, n):
        """W1 between N(0, sigma_n^2) and the invariant N(0, sigma^2 / (2 alpha))."""
        return abs(math.sqrt(self.variance_recursion(n)) - math.sqrt(self.invariant_variance)) * _E_ABS_Z

    def w1_curve(self, stop):
        v = self.variances(stop)
        return np.abs(np.sqrt(v) - math.sqrt(self.invariant_variance)) * _E_ABS_Z

    def tv_lower_bound_curve(self, n):
        """Gaussian TV lower bound (1/200) min(1, |1 - sigma_n^2 / sigma_inf^2|)."""
        return devroye_lower_bound(self.variance_recursion(n), self.invariant_variance)

    def tv_lower_bounds(self, stop):
        ratio = np.abs(1.0 - self.variances(stop) / self.invariant_variance)
        return np.minimum(1.0, ratio) / 200.0

    def square_summable(self, horizon):
        """Partial sum of gamma_k^2 and whether the schedule is square summable.

        For polynomial schedules the answer is exact (``a > 1/2``); for tables
        it is trivially true over the finite horizon.
        """
        s = self.schedule.sum_of_squares(horizon)
        if self.schedule.kind == "polynomial":
            return s, self.schedule.a > 0.5
        return s, True

    def table(self, stop):
        """Columns ``n, gamma_n, Gamma_n, sigma_n^2, W1, TV lower bound`` for ``1 <= n < stop``."""
        n = np.arange(1, stop)
        g = self.schedule.gammas(1, stop)
        G = np.asarray(self.schedule.gamma_sums(stop))[1:]
        v = self.variances(stop)[1:]
        w1 = self.w1_curve(stop)[1:]
        tv = self.tv_lower_bounds(stop)[1:]
        return np.column_stack([n, g, G, v, w1, tv])
