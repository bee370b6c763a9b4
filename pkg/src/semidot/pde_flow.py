"""Entropy gradient flow on grid x graph: drift-diffusion plus node exchange.

    df_g/dt = div(grad f_g + f_g grad V_g) - sum_g' (phi_g - phi_g') K theta(f_g, f_g'),
    phi = log f + V.

The spatial part uses the exponentially fitted (Scharfetter-Gummel) face
flux

    J = [f_{i+1} e^{d/2} - f_i e^{-d/2}] (d/2)/sinh(d/2) / dx,   d = V_{i+1} - V_i,

which is the flux ``e^{-V} grad(f e^V)`` with the logarithmic mean of
``e^{-V}`` on the face. It is linear in f, conserves mass exactly, and
vanishes identically on ``c exp(-V)``. Boundary faces carry no flux.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain_fields import (as_values, barrier_check, centered_gradient, entropy, integrate,
                            node_masses)
from .mobility import LOG_MEAN, Mobility

log = logging.getLogger(__name__)

EXPLICIT = "explicit"
SEMI_IMPLICIT = "semi-implicit"


class FlowError(RuntimeError):
    pass


class CFLError(ValueError):
    pass


class NonPositiveDensityError(FlowError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


def _sinhc_inverse(z):
    """``z / sinh(z)`` with its Taylor value near 0."""
    small = np.abs(z) < 1e-4
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 - z * z / 6.0, zs / np.sinh(zs))


class DriftDiffusion:
    """Face coefficients of the fitted flux, per axis: ``J = a f_{i+1} - b f_i``."""

    def __init__(self, pot):
        self.domain = pot.domain
        dx = self.domain.dx
        self.coef = []
        for k in range(self.domain.dimension):
            d = np.diff(pot.V, axis=k)
            c = _sinhc_inverse(0.5 * d) / dx
            self.coef.append((c * np.exp(0.5 * d), c * np.exp(-0.5 * d)))

    def fluxes(self, f):
        out = []
        for k, (a, b) in enumerate(self.coef):
            hi = np.take(f, np.arange(1, f.shape[k]), axis=k)
            lo = np.take(f, np.arange(0, f.shape[k] - 1), axis=k)
            out.append(a * hi - b * lo)
        return out

    def apply(self, f):
        """``div(grad f + f grad V)`` in flux form, node by node."""
        f = np.asarray(f, dtype=float)
        dx = self.domain.dx
        out = np.zeros_like(f)
        for k, J in enumerate(self.fluxes(f)):
            n = f.shape[k]
            left = [slice(None)] * f.ndim
            right = [slice(None)] * f.ndim
            left[k] = slice(0, n - 1)
            right[k] = slice(1, n)
            out[tuple(left)] += J / dx
            out[tuple(right)] -= J / dx
        return out

    def matrix(self, g):
        """Sparse matrix of :meth:`apply` restricted to node ``g``."""
        shape = self.domain.shape
        N = int(np.prod(shape))
        idx = np.arange(N).reshape(shape)
        dx = self.domain.dx
        rows, cols, vals = [], [], []
        for k, (a, b) in enumerate(self.coef):
            n = shape[k]
            lo = np.take(idx, np.arange(n - 1), axis=k).ravel()
            hi = np.take(idx, np.arange(1, n), axis=k).ravel()
            ak = a[..., g].ravel() / dx
            bk = b[..., g].ravel() / dx
            # out[lo] += a f[hi] - b f[lo];  out[hi] -= a f[hi] - b f[lo]
            rows += [lo, lo, hi, hi]
            cols += [hi, lo, hi, lo]
            vals += [ak, -bk, -ak, bk]
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N))


def chemical_potential(f, pot):
    f = as_values(f)
    if np.any(f <= 0):
        cell = tuple(int(k) for k in np.argwhere(f <= 0)[0])
        raise NonPositiveDensityError(f"log f needs f > 0; f = {f[cell]!r} at cell {cell}", cell)
    return np.log(f) + pot.V


def exchange(f, pot, graph, mobility):
    """``-sum_g' (phi_g - phi_g') K theta(f_g, f_g')`` per cell and node.

    For the log-mean mobility the product ``theta * (phi_g - phi_g')``
    equals ``u_g - u_g'`` with ``u = f e^V`` and is evaluated in that
    linear form.
    """
    f = as_values(f)
    K = graph.kernel
    if not np.any(K):
        return np.zeros_like(f)
    if mobility.kind == LOG_MEAN:
        u = f * np.exp(pot.V)
        diff = u[..., :, None] - u[..., None, :]
        return -(diff * K).sum(axis=-1)
    phi = chemical_potential(f, pot)
    diff = phi[..., :, None] - phi[..., None, :]
    return -(diff * (K * np.exp(-mobility.W)[..., None, None])).sum(axis=-1)


def rhs(f, pot, graph, mobility, operator=None):
    op = operator if operator is not None else DriftDiffusion(pot)
    return op.apply(as_values(f)) + exchange(f, pot, graph, mobility)


def max_drift(pot):
    return float(np.sqrt((pot.gradV ** 2).sum(axis=0)).max())


def cfl_limit(pot):
    """Largest admissible explicit step ``0.25 dx^2 / (1 + max|grad V| dx)``."""
    dx = pot.domain.dx
    return 0.25 * dx * dx / (1.0 + max_drift(pot) * dx)


def exchange_stiffness(f, pot, graph, mobility):
    """Gershgorin bound on the exchange Jacobian at ``f``.

    Explicit steps are stable for ``dt * stiffness <= 2`` and keep the
    linearised exchange monotone for ``dt * stiffness <= 1``.
    """
    K = graph.kernel
    if not np.any(K):
        return 0.0
    f = as_values(f)
    if mobility.kind == LOG_MEAN:
        e = np.exp(pot.V)
        return float(((e[..., :, None] + e[..., None, :]) * K).sum(axis=-1).max())
    inv = 1.0 / _positive(f)
    w = np.exp(-mobility.W)[..., None, None] * K
    return float(((inv[..., :, None] + inv[..., None, :]) * w).sum(axis=-1).max())


def _positive(f):
    if np.any(f <= 0):
        cell = tuple(int(k) for k in np.argwhere(f <= 0)[0])
        raise NonPositiveDensityError(f"density must be positive; f = {f[cell]!r} at cell {cell}", cell)
    return f


def default_dt(pot, T=None, graph=None, mobility=None, f=None):
    """``0.8`` of the CFL limit, capped by ``1/stiffness`` of the exchange at
    ``f`` when given, and shortened so that ``T`` is a whole number of steps."""
    dt = 0.8 * cfl_limit(pot)
    if f is not None and graph is not None:
        rate = exchange_stiffness(f, pot, graph, mobility or Mobility.mass_independent(pot))
        if rate > 0:
            dt = min(dt, 1.0 / rate)
    if T:
        dt = T / np.ceil(T / dt)
    return dt


def exchange_rate_bound(pot, graph, mobility, lam):
    """Largest relaxation rate of the exchange term for data with ``f e^V >= lam``."""
    deg = graph.kernel.sum(axis=1)
    if mobility.kind == LOG_MEAN:
        return float((np.exp(pot.V) * deg).max())
    return float((np.exp(pot.V - pot.W[..., None]) * deg).max() / lam)


@dataclass(frozen=True)
class FlowConfig:
    dt: float
    T: float
    scheme: str = EXPLICIT
    mobility: Mobility | None = None
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0 or not self.T >= 0:
            raise ValueError("need dt > 0 and T >= 0")
        if self.scheme not in (EXPLICIT, SEMI_IMPLICIT):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def diagnostics(self, pot):
        if self.scheme == EXPLICIT and self.dt > cfl_limit(pot) * (1 + 1e-12):
            return [f"explicit scheme needs dt <= 0.25*dx^2/(1+max|grad V| dx) = {cfl_limit(pot):.6g},"
                    f" got dt = {self.dt:.6g}"]
        return []


class FlowIntegrator:
    """Time stepper with cached operators."""

    def __init__(self, config, pot, graph):
        problems = config.diagnostics(pot)
        if problems:
            raise CFLError(problems[0])
        self.config = config
        self.pot = pot
        self.graph = graph
        self.mobility = config.mobility or Mobility.mass_independent(pot)
        self.op = DriftDiffusion(pot)
        self._lu = None
        if config.scheme == SEMI_IMPLICIT:
            N = int(np.prod(pot.domain.shape))
            eye = sp.identity(N, format="csc")
            self._lu = [spla.splu(eye - config.dt * self.op.matrix(g)) for g in range(pot.m)]

    def rhs(self, f):
        return rhs(f, self.pot, self.graph, self.mobility, self.op)

    def step(self, f):
        f = as_values(f)
        dt = self.config.dt
        if self._lu is None:
            new = f + dt * self.rhs(f)
        else:
            b = f + dt * exchange(f, self.pot, self.graph, self.mobility)
            shape = self.pot.domain.shape
            new = np.empty_like(f)
            for g, lu in enumerate(self._lu):
                new[..., g] = lu.solve(b[..., g].ravel()).reshape(shape)
        if np.any(new <= 0) or not np.all(np.isfinite(new)):
            bad = ~(new > 0)
            cell = tuple(int(k) for k in np.argwhere(bad)[0])
            raise NonPositiveDensityError(
                f"density became nonpositive at cell {cell} (value {new[cell]!r}); reduce dt", cell)
        return new


def step(f, config, pot, graph):
    return FlowIntegrator(config, pot, graph).step(f)


@dataclass
class Trajectory:
    """Recorded states of a run. ``densities`` has a leading time axis."""

    times: np.ndarray
    densities: np.ndarray
    energies: np.ndarray
    barrier_min: np.ndarray
    barrier_max: np.ndarray
    domain: object = None
    info: dict = field(default_factory=dict)

    def node_masses(self):
        return np.array([node_masses(f, self.domain) for f in self.densities])

    def masses(self):
        return np.array([integrate(f, self.domain) for f in self.densities])

    def summary(self):
        e = self.energies
        return {
            "final_time": float(self.times[-1]),
            "final_energy": float(e[-1]),
            "dissipation": (e[:-1] - e[1:]).tolist(),
            "max_energy_increase": float(np.max(np.diff(e), initial=0.0)),
            "barrier_min": self.barrier_min.tolist(),
            "barrier_max": self.barrier_max.tolist(),
            **self.info,
        }

    def write_csv(self, path, nodes):
        X = [c.ravel() for c in self.domain.coords]
        xnames = ["x"] if self.domain.dimension == 1 else ["x", "y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + xnames + ["g", "f"])
            for t, f in zip(self.times, self.densities):
                flat = f.reshape(-1, f.shape[-1])
                for i in range(flat.shape[0]):
                    for g, name in enumerate(nodes):
                        w.writerow([repr(float(t))] + [repr(float(c[i])) for c in X]
                                   + [name, repr(float(flat[i, g]))])

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def run(f0, config, pot, graph):
    """Integrate to ``config.T``, recording every ``record_every`` steps and the end.

    ``info`` records per-step maxima of the energy increase and mass error.
    """
    integ = FlowIntegrator(config, pot, graph)
    f = as_values(f0).copy()
    nsteps = int(round(config.T / config.dt))
    if abs(nsteps * config.dt - config.T) > 1e-9 * max(config.T, 1.0):
        raise ValueError("T must be a multiple of dt")
    times, dens, ener, bmin, bmax = [], [], [], [], []

    def record(t, f, e):
        ratio = f * np.exp(pot.V)
        times.append(t)
        dens.append(f.copy())
        ener.append(e)
        bmin.append(ratio.min())
        bmax.append(ratio.max())

    e = entropy(f, pot)
    m0 = integrate(f, pot.domain)
    record(0.0, f, e)
    worst_rise = 0.0
    worst_step_mass = 0.0
    for k in range(1, nsteps + 1):
        m_prev = integrate(f, pot.domain)
        f = integ.step(f)
        e_new = entropy(f, pot)
        worst_rise = max(worst_rise, e_new - e)
        worst_step_mass = max(worst_step_mass, abs(integrate(f, pot.domain) - m_prev))
        e = e_new
        if k % config.record_every == 0 or k == nsteps:
            record(k * config.dt, f, e)
    info = {"steps": nsteps, "dt": config.dt, "scheme": config.scheme,
            "max_step_energy_increase": worst_rise, "max_step_mass_change": worst_step_mass,
            "mass_drift": abs(integrate(f, pot.domain) - m0)}
    return Trajectory(np.array(times), np.array(dens), np.array(ener), np.array(bmin),
                      np.array(bmax), pot.domain, info)


def barrier_history(traj, pot, lam, Lam, rtol=1e-12):
    """Barrier reports at every recorded time."""
    return [barrier_check(f, pot, lam, Lam, rtol) for f in traj.densities]


def _weak_integrand(f, zeta, pot, graph, mobility):
    """``-sum grad zeta . (grad f + f grad V) + sum zeta * exchange`` on the grid.

    Face differences for ``grad zeta``, ``grad f`` and ``grad V``, face
    averages for ``f``.
    """
    d = pot.domain
    dx = d.dx
    total = 0.0
    for k in range(d.dimension):
        n = f.shape[k]
        hi = lambda a: np.take(a, np.arange(1, n), axis=k)
        lo = lambda a: np.take(a, np.arange(0, n - 1), axis=k)
        flux = (hi(f) - lo(f)) / dx + 0.5 * (hi(f) + lo(f)) * (hi(pot.V) - lo(pot.V)) / dx
        total -= np.sum((hi(zeta) - lo(zeta)) / dx * flux)
    total += np.sum(zeta * exchange(f, pot, graph, mobility))
    return total * d.cell_volume


def weak_form_residual(traj, zeta, r, s, pot, graph, mobility=None):
    """``|int zeta f(s) - int zeta f(r) - int_r^s <weak rhs> dt|``.

    Uses the recorded states in ``[r, s]`` and the trapezoidal rule in time.
    """
    mobility = mobility or Mobility.mass_independent(pot)
    zeta = np.asarray(zeta, dtype=float)
    t = traj.times
    sel = np.flatnonzero((t >= r - 1e-12) & (t <= s + 1e-12))
    if len(sel) < 2:
        raise ValueError("need at least two recorded times in [r, s]")
    vals = np.array([_weak_integrand(traj.densities[k], zeta, pot, graph, mobility) for k in sel])
    time_integral = np.trapezoid(vals, t[sel]) if hasattr(np, "trapezoid") else np.trapz(vals, t[sel])
    lhs = integrate(zeta * traj.densities[sel[-1]], pot.domain) - integrate(
        zeta * traj.densities[sel[0]], pot.domain)
    return abs(lhs - time_integral)


def spatial_velocity(f, pot):
    """Centred ``grad(log f + V)``; diagnostics only."""
    return centered_gradient(chemical_potential(f, pot), pot.domain)
