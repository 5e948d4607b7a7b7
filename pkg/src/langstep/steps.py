"""Decreasing step sequences gamma_n, their partial sums Gamma_n and related sums."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StepSchedule",
    "GammaReport",
    "polynomial",
    "explicit",
    "schedule_from_spec",
    "decay_sum",
    "decay_sums",
]

_DEFAULT_HORIZON = 1024


class StepSchedule:
    """A non-increasing sequence of positive steps ``gamma_1, gamma_2, ...``.

    Two kinds exist: ``polynomial`` (``gamma_n = gamma1 / n**a``) and
    ``explicit`` (a finite table).  Partial sums ``Gamma_n`` are accumulated
    with Kahan summation and cached; the cache grows on demand.

    Use :func:`polynomial` or :func:`explicit` to build one.
    """

    def __init__(self, kind, *, gamma1=None, a=None, values=None, horizon=_DEFAULT_HORIZON):
        if kind == "polynomial":
            if not (gamma1 is not None and gamma1 > 0 and math.isfinite(gamma1)):
                raise ValueError(f"gamma1 must be a positive finite real, got {gamma1!r}")
            if not (a is not None and a >= 0 and math.isfinite(a)):
                raise ValueError(f"a must be a non-negative real, got {a!r}")
            self._values = None
            self.gamma1 = float(gamma1)
            self.a = float(a)
        elif kind == "explicit":
            vals = np.asarray(values, dtype=float)
            if vals.ndim != 1 or vals.size == 0:
                raise ValueError("explicit schedule needs a non-empty 1-D table of steps")
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ValueError("explicit steps must be positive and finite")
            if np.any(np.diff(vals) > 0):
                k = int(np.argmax(np.diff(vals) > 0)) + 1
                raise ValueError(
                    f"explicit steps must be non-increasing (gamma_{k + 1} > gamma_{k})"
                )
            vals.setflags(write=False)
            self._values = vals
            self.gamma1 = float(vals[0])
            self.a = None
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        self.kind = kind
        self._lock = threading.Lock()
        # _Gamma[k] = Gamma_k, _Gamma[0] = 0
        self._Gamma = np.zeros(1)
        self._comp = 0.0
        self._extend(min(horizon, self.length) if self.length else horizon)

    # -- basic queries -------------------------------------------------
    @property
    def length(self):
        """Number of available steps (``None`` for unbounded schedules)."""
        return None if self._values is None else self._values.size

    def gamma(self, n):
        """Return gamma_n (n >= 1)."""
        n = _check_index(n, lower=1)
        if self._values is not None:
            if n > self._values.size:
                raise IndexError(f"step {n} beyond explicit table of length {self._values.size}")
            return float(self._values[n - 1])
        return float(self.gamma1 / np.power(np.float64(n), self.a))

    def gammas(self, start, stop):
        """Vector of gamma_k for ``start <= k < stop``."""
        start = _check_index(start, lower=1)
        if stop <= start:
            return np.empty(0)
        if self._values is not None:
            if stop - 1 > self._values.size:
                raise IndexError(f"step {stop - 1} beyond explicit table of length {self._values.size}")
            return self._values[start - 1 : stop - 1].copy()
        k = np.arange(start, stop, dtype=float)
        return self.gamma1 / k**self.a

    def gamma_sum(self, n):
        """Gamma_n = gamma_1 + ... + gamma_n, with Gamma_0 = 0."""
        n = _check_index(n, lower=0)
        self._ensure(n)
        return float(self._Gamma[n])

    def gamma_sums(self, stop):
        """Read-only view of ``Gamma_0 .. Gamma_{stop-1}``."""
        self._ensure(stop - 1)
        out = self._Gamma[:stop]
        out.setflags(write=False)
        return out

    def n_of_t(self, t):
        """N(t) = max{k >= 0 : Gamma_k <= t}."""
        if not t >= 0:
            raise ValueError(f"t must be non-negative, got {t!r}")
        if not math.isfinite(t):
            raise ValueError("t must be finite")
        while self._Gamma[-1] <= t:
            if self.length is not None and self._Gamma.size - 1 >= self.length:
                raise IndexError(f"t={t} beyond the total time {self._Gamma[-1]} of the table")
            self._ensure(2 * (self._Gamma.size - 1) + 1)
        return int(np.searchsorted(self._Gamma, t, side="right")) - 1

    # -- derived quantities --------------------------------------------
    def varpi(self):
        """Index limsup (gamma_n - gamma_{n+1}) / gamma_{n+1}**2.

        Closed form for the polynomial kind.  For an explicit table the
        limsup is not computable: the maximum of the ratio over the second
        half of the table is returned as an estimate.
        """
        if self.kind == "polynomial":
            if self.a == 0 or self.a < 1:
                return 0.0
            if self.a == 1:
                return 1.0 / self.gamma1
            return math.inf
        v = self._values
        if v.size < 2:
            return 0.0
        tail = v[(v.size - 1) // 2 :]
        ratios = (tail[:-1] - tail[1:]) / tail[1:] ** 2
        return float(ratios.max()) if ratios.size else 0.0

    @property
    def varpi_is_estimate(self):
        return self.kind == "explicit"

    def check_gamma_assumption(self, horizon):
        """Check non-increasing steps, gamma_n -> 0 and divergence of the sum."""
        horizon = _check_index(horizon, lower=1)
        if self.kind == "polynomial":
            return GammaReport(
                non_increasing=True,
                vanishing=self.a > 0,
                divergent=self.a <= 1,
                horizon=horizon,
            )
        h = min(horizon, self._values.size)
        v = self._values[:h]
        return GammaReport(
            non_increasing=bool(np.all(np.diff(v) <= 0)),
            vanishing=None,
            divergent=None,
            horizon=h,
            note="finite table: limit properties cannot be decided",
        )

    def sum_of_squares(self, n):
        """Partial sum of gamma_k**2 up to n (compensated)."""
        return math.fsum(self.gammas(1, n + 1) ** 2)

    def to_spec(self):
        if self.kind == "polynomial":
            return {"kind": "polynomial", "gamma1": self.gamma1, "a": self.a}
        return {"kind": "explicit", "values": [float(x) for x in self._values]}

    def __repr__(self):
        if self.kind == "polynomial":
            return f"polynomial(gamma1={self.gamma1!r}, a={self.a!r})"
        return f"explicit({list(self._values[:4])}{'...' if self._values.size > 4 else ''})"

    def __eq__(self, other):
        return isinstance(other, StepSchedule) and self.to_spec() == other.to_spec()

    def __hash__(self):
        return hash(repr(self.to_spec()))

    # -- cache ---------------------------------------------------------
    def _ensure(self, n):
        if n >= self._Gamma.size:
            if self.length is not None and n > self.length:
                raise IndexError(f"step {n} beyond explicit table of length {self.length}")
            target = max(n, 2 * (self._Gamma.size - 1))
            if self.length is not None:
                target = min(target, self.length)
            self._extend(target)

    def _extend(self, n):
        with self._lock:
            have = self._Gamma.size - 1
            if n <= have:
                return
            steps = self.gammas(have + 1, n + 1)
            new = np.empty(n + 1)
            new[: have + 1] = self._Gamma
            s = self._Gamma[have]
            c = self._comp
            for i, g in enumerate(steps.tolist(), start=have + 1):
                y = g - c
                t = s + y
                c = (t - s) - y
                s = t
                new[i] = s
            self._comp = c
            new.setflags(write=False)
            self._Gamma = new


@dataclass(frozen=True)
class GammaReport:
    """Outcome of checking the step assumption; ``None`` means inconclusive."""

    non_increasing: bool
    vanishing: bool | None
    divergent: bool | None
    horizon: int
    note: str = ""

    @property
    def satisfied(self):
        return bool(self.non_increasing and self.vanishing and self.divergent)

    def as_dict(self):
        return {
            "non_increasing": self.non_increasing,
            "vanishing": self.vanishing,
            "divergent": self.divergent,
            "horizon": self.horizon,
            "note": self.note,
        }


def polynomial(gamma1, a, horizon=_DEFAULT_HORIZON):
    """Schedule ``gamma_n = gamma1 / n**a``."""
    return StepSchedule("polynomial", gamma1=gamma1, a=a, horizon=horizon)


def explicit(values):
    """Schedule given by a finite non-increasing table of positive steps."""
    return StepSchedule("explicit", values=values)


def schedule_from_spec(spec):
    """Build a schedule from ``{"kind": ..., ...}`` or the short ``poly:g1:a`` form."""
    if isinstance(spec, StepSchedule):
        return spec
    if isinstance(spec, str):
        parts = spec.split(":")
        if parts[0] in ("poly", "polynomial") and len(parts) == 3:
            return polynomial(float(parts[1]), float(parts[2]))
        if parts[0] in ("const", "constant") and len(parts) == 2:
            return polynomial(float(parts[1]), 0.0)
        if parts[0] == "explicit" and len(parts) == 2:
            return explicit([float(x) for x in parts[1].split(",")])
        raise ValueError(f"cannot parse schedule {spec!r} (expected poly:GAMMA1:A)")
    kind = spec.get("kind")
    if kind == "polynomial":
        return polynomial(spec["gamma1"], spec["a"])
    if kind == "explicit":
        return explicit(spec["values"])
    raise ValueError(f"unknown schedule kind {kind!r}")


# ----------------------------------------------------------------------
# u_n = sum_{k<=n} gamma_k^2 exp(-rho (Gamma_n - Gamma_k))
# ----------------------------------------------------------------------

_SPLITTER = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def decay_sums(schedule, n, rho):
    """Return ``u_1 .. u_n`` with ``u_n = sum_k gamma_k^2 exp(-rho (Gamma_n - Gamma_k))``.

    Evaluated through ``u_{n+1} = u_n exp(-rho gamma_{n+1}) + gamma_{n+1}^2``
    in double-double arithmetic: the factor is carried as ``1 + expm1(-x)``
    so its rounding error is proportional to ``x``, which keeps the
    accumulated error near one ulp even when ``rho * gamma`` is tiny.
    """
    n = _check_index(n, lower=1)
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho!r}")
    g = schedule.gammas(1, n + 1).tolist()
    out = np.empty(n)
    hi, lo = _two_prod(g[0], g[0])
    out[0] = hi + lo
    for i in range(1, n):
        gk = g[i]
        # x = rho * gamma exactly as a double-double
        x_hi, x_lo = _two_prod(rho, gk)
        m = math.expm1(-x_hi)
        # exp(-(x_hi + x_lo)) - 1 ~= m - x_lo * (1 + m)
        m_lo = -x_lo * (1.0 + m)
        # u * (1 + m + m_lo) = u + u*m + u*m_lo
        p, perr = _two_prod(hi, m)
        perr += lo * m + hi * m_lo + lo
        s, serr = _two_sum(hi, p)
        serr += perr
        # + gamma^2 as a double-double
        q, qerr = _two_prod(gk, gk)
        s2, e2 = _two_sum(s, q)
        e2 += serr + qerr
        hi, lo = _two_sum(s2, e2)
        out[i] = hi + lo
    return out


def _check_index(n, lower):
    if isinstance(n, (bool, np.bool_)) or not isinstance(n, (int, np.integer)):
        if isinstance(n, float) and n.is_integer():
            n = int(n)
        else:
            raise TypeError(f"index must be an integer, got {n!r}")
    n = int(n)
    if n < lower:
        raise ValueError(f"index must be >= {lower}, got {n}")
    return n


def decay_sum(schedule, n, rho):
    """u_n for a single index; see :func:`decay_sums`."""
    return float(decay_sums(schedule, n, rho)[-1])
