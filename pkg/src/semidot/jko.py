"""Minimizing-movement (JKO) steps for the relative entropy under the static cost.

One step minimizes ``E(sigma) + A(mu, sigma)`` over ``sigma``. The target
``sigma = fbar - r`` is written through the transported density ``fbar``
and the exchanged mass ``r``; the exchange field has been eliminated in
closed form (see :mod:`semidot.static_transport`), leaving

    sum_g W2^2(mu_g, fbar_g) / (2 tau) + sum_i dx e^{W_i} r_i^T L_K^+ r_i / (2 tau)
        + sum (sigma log sigma + V sigma) dx

under fiber-mass constraints on ``fbar`` and zero per-cell, per-component
sums of ``r``. The problem is smooth and strictly convex on
``{sigma > 0, fbar > 0}`` and is solved by constrained Newton steps with
backtracking that never leaves that set. One spatial dimension only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _newton, transport1d
from .domain_fields import as_values, barrier_check, entropy, integrate
from .pde_flow import FlowConfig, Trajectory, run as run_flow
from .static_transport import (AdmissiblePair, _balance_constraints, _check_1d,
                               _fiber_mass_constraints, _laplacian_pinv, cost_of_pair,
                               displacement_bound, exchange_potential, gradient_exchange,
                               max_support_displacement)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JkoConfig:
    tau: float
    steps: int = 1
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if not 0 < self.tau < 0.5:
            raise ValueError("tau must lie in (0, 1/2)")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def diagnostics(self):
        if self.tau > 0.1:
            return [f"tau = {self.tau} exceeds the default range tau <= 0.1"]
        return []


@dataclass
class JkoStep:
    sigma: np.ndarray
    pair: AdmissiblePair
    fbar: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def certified(self):
        return bool(self.diagnostics.get("converged", False))


def _objective(mu, tau, pot, graph, domain):
    n, m = mu.shape
    N = n * m
    dx = domain.dx
    left = domain.left_edges[0]
    Lp = _laplacian_pinv(graph)
    expW = np.exp(pot.W)
    V = pot.V

    def fun(z):
        fb = z[:N].reshape(n, m)
        r = z[N:].reshape(n, m)
        sig = fb - r
        Lr = r @ Lp
        logs = np.log(sig)
        val = 0.5 * dx / tau * float(np.sum(expW[:, None] * r * Lr))
        val += dx * float(np.sum(sig * logs + V * sig))
        dphi = dx * (logs + 1.0 + V)
        g_f = dphi.copy()
        g_r = dx / tau * expW[:, None] * Lr - dphi
        H = np.zeros((2 * N, 2 * N))
        D = dx / sig.ravel()
        idx = np.arange(N)
        H[idx, idx] += D
        H[N + idx, N + idx] += D
        H[idx, N + idx] -= D
        H[N + idx, idx] -= D
        for i in range(n):
            sl = slice(N + i * m, N + (i + 1) * m)
            H[sl, sl] += dx / tau * expW[i] * Lp
        for g in range(m):
            w2 = transport1d.squared_distance(mu[:, g], fb[:, g], left, dx)
            val += 0.5 * w2 / tau
            g_f[:, g] += transport1d.potential_gradient(mu[:, g], fb[:, g], left, dx) / tau
            H[g:N:m, g:N:m] += transport1d.potential_hessian(mu[:, g], fb[:, g], left, dx) / tau
        return val, np.concatenate((g_f.ravel(), g_r.ravel())), H

    return fun


def el_residuals(sigma, fbar, pair, mu, pot, graph, domain):
    """Sup-norm residuals of the two optimality identities of a JKO step.

    ``exchange``: ``h_gg' - (phi_g - phi_g')`` over edges with ``K > 0``.
    ``transport``: ``(S(y) - y)/tau sigma - (grad sigma + sigma grad V)``
    with ``S`` the column barycentre of the plan and centred differences.
    """
    tau = pair.tau
    phi = np.log(sigma) + pot.V
    dphi = phi[:, :, None] - phi[:, None, :]
    mask = graph.kernel > 0
    ex = float(np.abs((pair.h - dphi)[:, mask]).max()) if mask.any() else 0.0
    left = domain.left_edges[0]
    dx = domain.dx
    tr = 0.0
    for g in range(mu.shape[1]):
        c = transport1d.monotone_coupling(mu[:, g], fbar[:, g], left, dx)
        bary = np.divide(c.column_displacement, fbar[:, g] * dx,
                         out=np.zeros_like(fbar[:, g]), where=fbar[:, g] > 0)
        flux = np.gradient(sigma[:, g], dx) + sigma[:, g] * pot.gradV[0][:, g]
        tr = max(tr, float(np.abs(bary / tau * sigma[:, g] - flux).max()))
    return {"exchange": ex, "transport": tr}


def jko_step(mu, cfg, pot, graph, domain, barrier=None):
    """One minimizing-movement step from ``mu``.

    ``barrier = (lam, Lam)`` enables the barrier and displacement checks.
    Returns a :class:`JkoStep`; ``diagnostics['converged']`` is False when
    the solver stopped above tolerance (the best iterate is returned).
    """
    _check_1d(domain)
    mu = as_values(mu)
    if np.any(mu <= 0):
        raise ValueError("JKO step needs a strictly positive density")
    n, m = mu.shape
    N = n * m
    dx = domain.dx
    nvars = 2 * N
    rows = _fiber_mass_constraints(n, m, dx, range(m), nvars) + \
        _balance_constraints(n, m, graph, N, nvars)
    A = np.array(rows)
    z0 = np.concatenate((mu.ravel(), np.zeros(N)))

    def inside(z):
        fb = z[:N]
        return bool(np.all(fb > 0) and np.all(fb - z[N:] > 0))

    res = _newton.minimize(_objective(mu, cfg.tau, pot, graph, domain), A, z0, inside,
                           cfg.tol, residual_scale=dx, max_iter=cfg.max_iter)
    fbar = res.z[:N].reshape(n, m)
    r = res.z[N:].reshape(n, m)
    sigma = fbar - r
    sigma = sigma / integrate(sigma, domain)
    left = domain.left_edges[0]
    plans = np.stack([transport1d.monotone_coupling(mu[:, g], fbar[:, g], left, dx).plan
                      for g in range(m)])
    h = gradient_exchange(exchange_potential(r, cfg.tau, pot, graph))
    pair = AdmissiblePair(plans, h, cfg.tau)
    cost = cost_of_pair(pair, pot, graph, domain)
    e_mu = entropy(mu, pot)
    e_sig = entropy(sigma, pot)
    diag = {
        "converged": res.converged,
        "iterations": res.iterations,
        "kkt_residual": res.residual,
        "cost": cost,
        "energy_before": e_mu,
        "energy_after": e_sig,
        "energy_inequality": e_sig + cost - e_mu,
        "el": el_residuals(sigma, fbar, pair, mu, pot, graph, domain),
    }
    # exchange direction: sigma - fbar has the sign of -sum (phi_g - phi_g') K e^{-W}
    phi = np.log(sigma) + pot.V
    drive = ((phi[:, :, None] - phi[:, None, :]) * graph.kernel).sum(axis=2) * np.exp(-pot.W)[:, None]
    change = sigma - fbar
    sig_cells = np.abs(drive) > 1e-6 * max(np.abs(drive).max(), 1e-300)
    diag["exchange_direction_ok"] = bool(np.all(change[sig_cells] * drive[sig_cells] <= 0))
    if barrier is not None:
        lam, Lam = barrier
        rep = barrier_check(sigma, pot, lam, Lam)
        diag["barrier"] = {"passed": rep.passed, "min_ratio": rep.min_ratio,
                           "max_ratio": rep.max_ratio, "violations": rep.violations}
        diag["displacement"] = {"max": max_support_displacement(pair, domain),
                                "bound": displacement_bound(lam, Lam, cfg.tau, dx)}
    if not res.converged:
        log.warning("JKO step not certified: KKT residual %.3e > tol %.1e", res.residual, cfg.tol)
    return JkoStep(sigma, pair, fbar, diag)


def jko_run(f0, cfg, pot, graph, domain, barrier=None):
    """Iterate ``cfg.steps`` JKO steps; ``times[k] = k tau``."""
    f = as_values(f0)
    times, dens, energies, bmin, bmax, steps = [0.0], [f], [entropy(f, pot)], [], [], []

    def ratios(f):
        q = f * np.exp(pot.V)
        bmin.append(q.min())
        bmax.append(q.max())

    ratios(f)
    for k in range(cfg.steps):
        st = jko_step(f, cfg, pot, graph, domain, barrier)
        f = st.sigma
        times.append((k + 1) * cfg.tau)
        dens.append(f)
        energies.append(st.diagnostics["energy_after"])
        ratios(f)
        steps.append(st.diagnostics)
    info = {"tau": cfg.tau, "steps": steps,
            "certified": all(s["converged"] for s in steps)}
    return Trajectory(np.array(times), np.array(dens), np.array(energies), np.array(bmin),
                      np.array(bmax), domain, info)


@dataclass
class ErrorTable:
    taus: list
    errors: list
    ratios: list
    times: list
    reference_dt: float

    def rows(self):
        return [{"tau": t, "error": e, "ratio": r} for t, e, r in zip(self.taus, self.errors, self.ratios)]

    def write_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "l2_error", "ratio_to_previous"])
            for row in self.rows():
                w.writerow([repr(row["tau"]), repr(row["error"]),
                            "" if row["ratio"] is None else repr(row["ratio"])])


def _l2(a, b, domain):
    return float(np.sqrt(np.sum((a - b) ** 2) * domain.cell_volume))


def compare_to_pde(f0, taus, T, pot, graph, domain, dt_ref=1e-4, tol=1e-8, runner=None):
    """Sup over shared times of the grid L2 distance between the
    piecewise-constant JKO interpolant and a fine explicit PDE solution.

    Shared times are the multiples of ``max(taus)`` in ``(0, T]``; at
    ``t = k tau`` the interpolant equals the ``k``-th iterate. ``runner``
    maps a list of thunks to their results (for parallel fan-out).
    """
    taus = [float(t) for t in taus]
    coarse = max(taus)
    for t in taus:
        if abs(round(coarse / t) * t - coarse) > 1e-9 or abs(round(T / t) * t - T) > 1e-9:
            raise ValueError("each tau must divide max(taus) and T")
    nshared = int(round(T / coarse))
    shared = [coarse * (k + 1) for k in range(nshared)]
    rec = int(round(coarse / dt_ref))
    ref = run_flow(as_values(f0), FlowConfig(dt=dt_ref, T=T, record_every=rec), pot, graph)
    ref_at = {round(t, 12): f for t, f in zip(ref.times, ref.densities)}

    def one(tau):
        tr = jko_run(f0, JkoConfig(tau=tau, steps=int(round(T / tau)), tol=tol), pot, graph, domain)
        stride = int(round(coarse / tau))
        err = max(_l2(tr.densities[stride * (k + 1)], ref_at[round(t, 12)], domain)
                  for k, t in enumerate(shared))
        return err, tr.info["certified"]

    thunks = [lambda tau=tau: one(tau) for tau in taus]
    results = runner(thunks) if runner else [th() for th in thunks]
    errors = [r[0] for r in results]
    ratios = [None] + [errors[k - 1] / errors[k] if errors[k] > 0 else float("inf")
                       for k in range(1, len(errors))]
    table = ErrorTable(taus, errors, ratios, shared, dt_ref)
    table.certified = all(r[1] for r in results)
    return table
