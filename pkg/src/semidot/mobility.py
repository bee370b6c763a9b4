"""Mobility functions for the graph part of the transport metric.

Two kinds are supported: a mass-independent mobility ``exp(-W(x))`` and the
logarithmic mean of the V-scaled masses ``theta_log(s e^{V_g}, t e^{V_g'})``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIAGONAL_TOL = 1e-6

MASS_INDEPENDENT = "mass_independent"
LOG_MEAN = "log_mean"


class MobilityError(ValueError):
    pass


def theta_log(a, b):
    """Logarithmic mean ``(a - b) / (log a - log b)``, vectorized.

    ``theta_log(a, a) = a`` and ``theta_log(a, 0) = 0``. Written as
    ``sqrt(ab) sinh(z)/z`` with ``z = (log a - log b)/2`` and a quadratic
    Taylor branch near the diagonal.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise MobilityError("theta_log needs nonnegative arguments")
    pos = (a > 0) & (b > 0)
    sa = np.where(pos, a, 1.0)
    sb = np.where(pos, b, 1.0)
    delta = np.log(sa) - np.log(sb)
    z = 0.5 * delta
    small = np.abs(delta) < DIAGONAL_TOL
    zs = np.where(small, 1.0, z)
    ratio = np.where(small, 1.0 + z * z / 6.0, np.sinh(zs) / zs)
    out = np.where(pos, np.sqrt(sa * sb) * ratio, 0.0)
    return out if out.ndim else float(out)


def dtheta_log_da(a, b):
    """``d/da theta_log(a, b) = (delta - 1 + e^{-delta}) / delta^2`` with ``delta = log(a/b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise MobilityError("derivative of theta_log needs positive arguments")
    delta = np.log(a) - np.log(b)
    small = np.abs(delta) < DIAGONAL_TOL
    ds = np.where(small, 1.0, delta)
    out = np.where(small, 0.5 - delta / 6.0 + delta * delta / 24.0,
                   (ds + np.expm1(-ds)) / (ds * ds))
    return out if out.ndim else float(out)


def _pair(values):
    """Broadcast a ``(..., m)`` array to ``(..., m, m)`` first/second arguments."""
    return values[..., :, None], values[..., None, :]


@dataclass(frozen=True)
class Mobility:
    """``kind`` is ``mass_independent`` (uses ``W``) or ``log_mean`` (uses ``V``)."""

    kind: str
    W: np.ndarray | None = None
    V: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == MASS_INDEPENDENT:
            if self.W is None:
                raise MobilityError("mass-independent mobility needs W")
        elif self.kind == LOG_MEAN:
            if self.V is None:
                raise MobilityError("log-mean mobility needs V")
        else:
            raise MobilityError(f"unknown mobility kind {self.kind!r}")

    @classmethod
    def mass_independent(cls, pot):
        return cls(MASS_INDEPENDENT, W=pot.W)

    @classmethod
    def log_mean(cls, pot):
        return cls(LOG_MEAN, V=pot.V)

    @classmethod
    def from_spec(cls, spec, pot):
        kind = (spec or {}).get("kind", MASS_INDEPENDENT)
        if kind == MASS_INDEPENDENT:
            return cls.mass_independent(pot)
        if kind == LOG_MEAN:
            return cls.log_mean(pot)
        raise MobilityError(f"unknown mobility kind {kind!r}")

    @property
    def mass_independent_kind(self):
        return self.kind == MASS_INDEPENDENT

    def theta(self, f):
        """``theta(f_g, f_g')`` on every cell, shape ``(*grid, m, m)``."""
        f = np.asarray(f, dtype=float)
        m = f.shape[-1]
        if self.kind == MASS_INDEPENDENT:
            w = np.exp(-self.W)[..., None, None]
            return np.broadcast_to(w, f.shape[:-1] + (m, m)).copy()
        u = f * np.exp(self.V)
        a, b = _pair(u)
        return theta_log(np.broadcast_to(a, u.shape + (m,)), np.broadcast_to(b, u.shape + (m,)))

    def dtheta1(self, f):
        """Derivative of ``theta(s, t)`` in ``s`` at ``(f_g, f_g')``."""
        f = np.asarray(f, dtype=float)
        m = f.shape[-1]
        if self.kind == MASS_INDEPENDENT:
            return np.zeros(f.shape + (m,))
        if np.any(f <= 0):
            raise MobilityError("log-mean mobility derivative needs positive masses")
        eV = np.exp(self.V)
        u = f * eV
        a, b = _pair(u)
        shape = u.shape + (m,)
        d = dtheta_log_da(np.broadcast_to(a, shape), np.broadcast_to(b, shape))
        return d * eV[..., :, None]


def _cell(arr, i):
    return arr[i] if isinstance(i, tuple) else arr[(i,)]


def theta_eval(mob, i, g, gp, s, t):
    """Scalar mobility at grid index ``i`` for node pair ``(g, gp)``."""
    if s < 0 or t < 0:
        raise MobilityError("masses must be nonnegative")
    if mob.kind == MASS_INDEPENDENT:
        return float(np.exp(-_cell(mob.W, i)))
    v = _cell(mob.V, i)
    return float(theta_log(s * np.exp(v[g]), t * np.exp(v[gp])))


def dtheta1(mob, i, g, gp, s, t):
    if mob.kind == MASS_INDEPENDENT:
        return 0.0
    if s <= 0 or t <= 0:
        raise MobilityError("log-mean mobility derivative needs positive masses")
    v = _cell(mob.V, i)
    return float(np.exp(v[g]) * dtheta_log_da(s * np.exp(v[g]), t * np.exp(v[gp])))


def _gauss_panels(func, a, b, panels, order=8):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    pts = mid[:, None] + half[:, None] * x[None, :]
    return float(np.sum(half[:, None] * w[None, :] * func(pts)))


def singular_integral(theta, panels=256):
    """``int_0^1 theta(1 - t, t)^{-1/2} dt``.

    Split at 1/2 and substitute ``t = u^2`` (resp. ``1 - t = u^2``) so the
    endpoint singularities become integrable-smooth.
    """
    u_max = np.sqrt(0.5)

    def left(u):
        t = u * u
        return 2 * u / np.sqrt(theta(1 - t, t))

    def right(u):
        t = 1 - u * u
        return 2 * u / np.sqrt(theta(1 - t, t))

    return _gauss_panels(left, 0.0, u_max, panels) + _gauss_panels(right, 0.0, u_max, panels)


@dataclass(frozen=True)
class AssumptionReport:
    checks: dict
    constants: dict

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())


def _bivariate(mob, i, g, gp):
    """Vectorized ``theta(s, t)`` for fixed cell and node pair."""
    if mob.kind == MASS_INDEPENDENT:
        w = float(np.exp(-_cell(mob.W, i)))
        return lambda s, t: np.full(np.broadcast(np.asarray(s), np.asarray(t)).shape, w)
    v = _cell(mob.V, i)
    ea, eb = np.exp(v[g]), np.exp(v[gp])
    return lambda s, t: theta_log(np.asarray(s) * ea, np.asarray(t) * eb)


def check_assumptions(mob, rng, samples=1000, tol=1e-12, c_samples=8):
    """Sample symmetry, monotonicity, finiteness of C and either mass
    independence (mass-independent kind) or homogeneity (log-mean kind).

    Symmetry compares ``theta_{x,g,g'}(s, t)`` with ``theta_{x,g',g}(t, s)``.
    Returns the worst relative violation per property.
    """
    arr = mob.W if mob.kind == MASS_INDEPENDENT else mob.V[..., 0]
    grid_shape = arr.shape
    m = 1 if mob.kind == MASS_INDEPENDENT else mob.V.shape[-1]
    worst = {"symmetry": 0.0, "monotonicity": 0.0, "homogeneity": 0.0, "mass_independence": 0.0}
    for _ in range(samples):
        i = tuple(int(rng.integers(n)) for n in grid_shape)
        g, gp = (int(rng.integers(m)), int(rng.integers(m))) if m > 1 else (0, 0)
        s, t, r = np.exp(rng.uniform(-6, 3, size=3))
        lam = float(np.exp(rng.uniform(-4, 4)))
        th = _bivariate(mob, i, g, gp)
        th_rev = _bivariate(mob, i, gp, g)
        base = float(th(s, t))
        scale = max(abs(base), 1e-300)
        worst["symmetry"] = max(worst["symmetry"], abs(base - float(th_rev(t, s))) / scale)
        lo, hi = min(r, s), max(r, s)
        drop = float(th(lo, t)) - float(th(hi, t))
        worst["monotonicity"] = max(worst["monotonicity"], max(drop, 0.0) / scale)
        worst["homogeneity"] = max(worst["homogeneity"],
                                   abs(float(th(lam * s, lam * t)) - lam * base) / max(lam * scale, 1e-300))
        if mob.kind == MASS_INDEPENDENT:
            worst["mass_independence"] = max(worst["mass_independence"],
                                             abs(float(th(r, lam)) - base) / scale)
    checks = {k: {"passed": v <= tol, "worst": v} for k, v in worst.items()}
    if mob.kind == MASS_INDEPENDENT:
        del checks["homogeneity"]
    else:
        del checks["mass_independence"]
    constants = {}
    for _ in range(c_samples):
        i = tuple(int(rng.integers(n)) for n in grid_shape)
        g, gp = (int(rng.integers(m)), int(rng.integers(m))) if m > 1 else (0, 0)
        if g == gp and m > 1:
            gp = (g + 1) % m
        constants[(i, g, gp)] = singular_integral(_bivariate(mob, i, g, gp))
    finite = all(np.isfinite(c) and c > 0 for c in constants.values())
    checks["integral_C"] = {"passed": finite, "worst": max(constants.values()) if constants else 0.0}
    return AssumptionReport(checks, constants)
