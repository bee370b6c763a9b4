"""Dynamic transport on grid x graph: kinetic norm, continuity equation,
minimal potentials, approximate distances and Hamiltonian flows.

For a density ``f`` the kinetic form is

    <phi, phi>_f = sum_faces f_face |D phi|^2 dx^d
                   + 1/2 sum_cells sum_{g,g'} K theta(f_g, f_g') (phi_g' - phi_g)^2 dx^d,

``f_face`` the mean of the two cells. ``M(f)`` denotes its symmetric
matrix, so a potential ``phi`` moves mass by ``dx^d df/dt = M(f) phi``.
Fields are flattened in C order (cell major, node minor).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain_fields import as_values, entropy, integrate
from .graph_core import connected_components

log = logging.getLogger(__name__)

_DENSE_LIMIT = 1500


class DegenerateDensityError(ValueError):
    pass


def _faces(domain):
    """Flat cell index pairs ``(p, q)`` of all interior faces."""
    idx = np.arange(int(np.prod(domain.shape))).reshape(domain.shape)
    pairs = []
    for k in range(domain.dimension):
        n = domain.shape[k]
        p = np.take(idx, np.arange(n - 1), axis=k).ravel()
        q = np.take(idx, np.arange(1, n), axis=k).ravel()
        pairs.append((p, q))
    p = np.concatenate([a for a, _ in pairs])
    q = np.concatenate([b for _, b in pairs])
    return p, q


def _flat(f):
    f = np.asarray(f, dtype=float)
    return f.reshape(-1, f.shape[-1])


def spatial_matrix(f, domain):
    """Spatial part of ``M(f)``."""
    F = _flat(f)
    ncell, m = F.shape
    p, q = _faces(domain)
    w = 0.5 * (F[p] + F[q]) * domain.dx ** (domain.dimension - 2)
    g = np.arange(m)
    P = (p[:, None] * m + g).ravel()
    Q = (q[:, None] * m + g).ravel()
    w = w.ravel()
    rows = np.concatenate((P, Q, P, Q))
    cols = np.concatenate((P, Q, Q, P))
    vals = np.concatenate((w, w, -w, -w))
    N = ncell * m
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def graph_matrix(f, mobility, graph, domain):
    """Graph part of ``M(f)``: per cell the Laplacian of ``K theta``."""
    F = _flat(f)
    ncell, m = F.shape
    th = mobility.theta(np.asarray(f, dtype=float)).reshape(ncell, m, m)
    w = th * graph.kernel * domain.cell_volume
    a, b = np.nonzero(np.triu(graph.kernel, 1))
    if len(a) == 0:
        return sp.csr_matrix((ncell * m, ncell * m))
    cell = np.arange(ncell)
    P = (cell[:, None] * m + a).ravel()
    Q = (cell[:, None] * m + b).ravel()
    ww = w[:, a, b].ravel()
    rows = np.concatenate((P, Q, P, Q))
    cols = np.concatenate((P, Q, Q, P))
    vals = np.concatenate((ww, ww, -ww, -ww))
    N = ncell * m
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def kinetic_matrix(f, mobility, graph, domain):
    return spatial_matrix(f, domain) + graph_matrix(f, mobility, graph, domain)


def kinetic_energy(phi, f, mobility, graph, domain, psi=None):
    """``<phi, phi>_f``; with ``psi`` the graph part uses ``psi`` instead."""
    x = np.asarray(phi, dtype=float).ravel()
    y = x if psi is None else np.asarray(psi, dtype=float).ravel()
    return float(x @ (spatial_matrix(f, domain) @ x) + y @ (graph_matrix(f, mobility, graph, domain) @ y))


def kinetic_density_derivative(phi, f, mobility, graph, domain):
    """Gradient of ``<phi, phi>_f`` with respect to the cell values of ``f``."""
    f = np.asarray(f, dtype=float)
    Phi = _flat(phi)
    p, q = _faces(domain)
    d2 = 0.5 * (Phi[q] - Phi[p]) ** 2 * domain.dx ** (domain.dimension - 2)
    out = np.zeros_like(Phi)
    np.add.at(out, p, d2)
    np.add.at(out, q, d2)
    if not mobility.mass_independent_kind and np.any(graph.kernel):
        dth = mobility.dtheta1(f).reshape(Phi.shape[0], Phi.shape[1], Phi.shape[1])
        diff = Phi[:, :, None] - Phi[:, None, :]
        out += (dth * graph.kernel * diff * diff).sum(axis=2) * domain.cell_volume
    return out.reshape(f.shape)


def apply_kinetic(phi, f, mobility, graph, domain, psi=None):
    """``dx^-d (M_x(f) phi + M_g(f) psi)``: the rate of change of ``f``."""
    x = np.asarray(phi, dtype=float).ravel()
    y = x if psi is None else np.asarray(psi, dtype=float).ravel()
    out = spatial_matrix(f, domain) @ x + graph_matrix(f, mobility, graph, domain) @ y
    return (out / domain.cell_volume).reshape(np.shape(f))


@dataclass(frozen=True)
class VelocityPotentials:
    """Spatial potential ``phi`` and graph potential ``psi``; ``psi=None`` means ``psi = phi``."""

    phi: np.ndarray
    psi: np.ndarray | None = None

    def __post_init__(self):
        for a in (self.phi, self.psi):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("potentials must be finite")

    @property
    def graph_potential(self):
        return self.phi if self.psi is None else self.psi


def continuity_residual(f_a, f_b, pots, dt, mobility, graph, domain):
    """Sup norm of ``(f_b - f_a)/dt + div_x(fbar grad phi) + div_g(theta(fbar) grad psi)``
    (discrete, mid-point density ``fbar``)."""
    phi, psi = pots.phi, pots.graph_potential
    fa = as_values(f_a)
    fb = as_values(f_b)
    fbar = 0.5 * (fa + fb)
    rate = apply_kinetic(phi, fbar, mobility, graph, domain, psi)
    return float(np.abs((fb - fa) / dt - rate).max())


def _kernel_components(graph, shape):
    """Constant modes of ``M(f)`` for positive ``f``: one per graph component."""
    ncell = int(np.prod(shape))
    m = graph.m
    modes = []
    for comp in graph.components:
        v = np.zeros((ncell, m))
        v[:, list(comp)] = 1.0
        modes.append(v.ravel())
    return np.array(modes)


def minimal_selection(f, source, mobility, graph, domain, rtol=1e-10, atol=1e-13):
    """Single potential of least kinetic norm solving
    ``div_x(f grad phi) + div_g(theta grad phi) = source``, i.e.
    ``-dx^-d M(f) phi = source``.

    ``phi`` has zero mean on every connected component of the graph. A
    source whose component integrals are below ``atol + rtol * |source|_1``
    is projected onto the compatible set first.
    """
    f = as_values(f)
    src = np.asarray(source, dtype=float)
    if np.any(f <= 0):
        raise DegenerateDensityError("minimal selection needs a strictly positive density")
    modes = _kernel_components(graph, domain.shape)
    b = -src.ravel() * domain.cell_volume
    compat = modes @ b
    if np.any(np.abs(compat) > atol + rtol * np.abs(b).sum()):
        raise ValueError(f"source must integrate to zero on every graph component (got {compat})")
    counts = modes.sum(axis=1)
    b = b - modes.T @ (compat / counts)
    scale = np.abs(b).max(initial=0.0)
    if scale == 0:
        return np.zeros_like(f)
    M = kinetic_matrix(f, mobility, graph, domain)
    k = modes.shape[0]
    rhs = np.concatenate((b, np.zeros(k)))
    if len(b) <= _DENSE_LIMIT:
        big = np.zeros((len(b) + k, len(b) + k))
        big[:len(b), :len(b)] = M.toarray()
        big[:len(b), len(b):] = modes.T
        big[len(b):, :len(b)] = modes
        sol = np.linalg.solve(big, rhs)
    else:
        B = sp.csr_matrix(modes.T)
        sol = spla.spsolve(sp.bmat([[M, B], [B.T, None]], format="csc"), rhs)
    phi = sol[:len(b)]
    res = np.abs(M @ phi - b).max() / scale
    if res > 1e-8:
        raise ArithmeticError(f"minimal selection residual {res:.2e} above 1e-8")
    return phi.reshape(f.shape)


def feasible_competitor(f, source, mobility, graph, domain, rng, amplitude=1.0):
    """Random pair ``(phi, psi)`` with the same divergence as the minimal potential.

    ``psi`` is random up to node constants fixed by a graph-Poisson solve so
    that each node's spatial problem is solvable; ``phi`` then solves the
    per-node Neumann problems.
    """
    f = as_values(f)
    ncell = int(np.prod(domain.shape))
    m = graph.m
    b = -np.asarray(source, dtype=float).reshape(ncell, m) * domain.cell_volume
    Mg = graph_matrix(f, mobility, graph, domain)
    psi = amplitude * rng.standard_normal((ncell, m))
    resid = b - (Mg @ psi.ravel()).reshape(ncell, m)
    # node constants c with sum_i (Mg (1 c))_ig = sum_i resid_ig
    th = mobility.theta(f).reshape(ncell, m, m)
    Theta = (th * graph.kernel).sum(axis=0) * domain.cell_volume
    Lap = np.diag(Theta.sum(axis=1)) - Theta
    need = resid.sum(axis=0)
    c = np.zeros(m)
    for comp in connected_components(Theta):
        idx = np.asarray(comp)
        if len(idx) > 1:
            c[idx] = np.linalg.lstsq(Lap[np.ix_(idx, idx)], need[idx], rcond=None)[0]
    psi += c
    resid = b - (Mg @ psi.ravel()).reshape(ncell, m)
    Mx = spatial_matrix(f, domain)
    phi = np.zeros((ncell, m))
    for g in range(m):
        sel = np.arange(ncell) * m + g
        A = Mx[sel][:, sel]
        ones = sp.csr_matrix(np.ones((ncell, 1)))
        big = sp.bmat([[A, ones], [ones.T, None]], format="csc")
        phi[:, g] = spla.spsolve(big, np.concatenate((resid[:, g], [0.0])))[:ncell]
    return phi.reshape(f.shape), psi.reshape(f.shape)


@dataclass
class DecompositionReport:
    relative_residual: float
    witness_value: float
    witness: dict | None
    passed: bool


def decomposition_check(phi, psi, tol=1e-10):
    """Test whether ``phi - psi`` splits as ``a(x) + b(g)``.

    The least-squares split is the two-way mean decomposition. The witness
    is the largest four-point combination
    ``D(y', g) - D(y', g') - D(y, g) + D(y, g')``.
    """
    D = _flat(np.asarray(phi, dtype=float) - np.asarray(psi, dtype=float))
    row = D.mean(axis=1, keepdims=True)
    col = D.mean(axis=0, keepdims=True)
    R = D - row - col + D.mean()
    scale = max(np.abs(D).max(), 1e-300)
    rel = float(np.sqrt((R ** 2).sum() / max((D ** 2).sum(), 1e-300)))
    best, wit = 0.0, None
    m = D.shape[1]
    for g in range(m):
        for gp in range(g + 1, m):
            diff = R[:, g] - R[:, gp]
            hi, lo = int(np.argmax(diff)), int(np.argmin(diff))
            val = float(diff[hi] - diff[lo])
            if val > best:
                best = val
                wit = {"cells": (lo, hi), "nodes": (g, gp), "value": val}
    passed = best <= tol * scale
    return DecompositionReport(rel, best / scale, None if passed else wit, passed)


@dataclass
class DiscretePath:
    """``densities[k]`` at ``times[k]``; ``phi[k]``, ``psi[k]`` act on ``[t_k, t_{k+1}]``."""

    times: np.ndarray
    densities: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    residuals: np.ndarray
    info: dict = field(default_factory=dict)

    def reversed(self):
        return DiscretePath(self.times[-1] - self.times[::-1], self.densities[::-1],
                            -self.phi[::-1], -self.psi[::-1], self.residuals[::-1], dict(self.info))

    def write_csv(self, path, domain, nodes):
        """Rows ``t, x..., g, f, phi``; the potential of interval ``k`` is
        reported at its left time, the last time repeats the last interval."""
        import csv
        coords = np.stack([c.ravel() for c in domain.coords], axis=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{k}" for k in range(domain.dimension)] + ["g", "f", "phi"])
            for k, t in enumerate(self.times):
                F = _flat(self.densities[k])
                P = _flat(self.phi[min(k, len(self.phi) - 1)])
                for i in range(F.shape[0]):
                    for g, name in enumerate(nodes):
                        w.writerow([repr(float(t))] + [repr(float(c)) for c in coords[i]]
                                   + [name, repr(float(F[i, g])), repr(float(P[i, g]))])


def path_from_densities(densities, mobility, graph, domain, T=1.0):
    """Attach minimal potentials to a density sequence on ``[0, T]``."""
    dens = np.asarray(densities, dtype=float)
    k = dens.shape[0] - 1
    dt = T / k
    phis, res = [], []
    for j in range(k):
        fbar = 0.5 * (dens[j] + dens[j + 1])
        src = -(dens[j + 1] - dens[j]) / dt
        phi = minimal_selection(fbar, src, mobility, graph, domain)
        phis.append(phi)
        res.append(continuity_residual(dens[j], dens[j + 1], VelocityPotentials(phi), dt,
                                       mobility, graph, domain))
    phis = np.array(phis)
    return DiscretePath(np.linspace(0, T, k + 1), dens, phis, phis.copy(), np.array(res))


def kinetic_action(path, mobility, graph, domain):
    """``sum_k dt <phi_k, phi_k>`` at the mid-point densities."""
    total = 0.0
    for k in range(len(path.times) - 1):
        dt = path.times[k + 1] - path.times[k]
        fbar = 0.5 * (path.densities[k] + path.densities[k + 1])
        total += dt * kinetic_energy(path.phi[k], fbar, mobility, graph, domain, path.psi[k])
    return total


def _interval_terms(dens, dt, mobility, graph, domain, need_grad):
    """Action and its gradient in the densities, via the exact minimal potentials."""
    action = 0.0
    grad = np.zeros_like(dens) if need_grad else None
    vol = domain.cell_volume
    phis = []
    for j in range(dens.shape[0] - 1):
        fbar = 0.5 * (dens[j] + dens[j + 1])
        src = -(dens[j + 1] - dens[j]) / dt
        phi = minimal_selection(fbar, src, mobility, graph, domain)
        phis.append(phi)
        e = kinetic_energy(phi, fbar, mobility, graph, domain)
        action += dt * e
        if need_grad:
            # action_j = b^T M^+ b / dt with b = vol (f_{j+1} - f_j), phi = M^+ b / dt
            dM = kinetic_density_derivative(phi, fbar, mobility, graph, domain)
            grad[j + 1] += 2 * vol * phi - 0.5 * dt * dM
            grad[j] += -2 * vol * phi - 0.5 * dt * dM
    return action, grad, phis


def dynamic_w2(mu0, mu1, mobility, graph, domain, T_steps=8, tol=1e-10, max_iter=2000):
    """Upper bound on the squared dynamic distance by minimizing the
    discrete action over intermediate densities.

    Interior densities are ``exp(s) / sum(exp(s) dx^d)`` (strictly
    positive, unit mass); the action and its exact gradient are passed to
    L-BFGS. Returns ``(action, path)``; ``path.info`` records convergence.
    The action is an upper bound whether or not the optimizer converged.
    """
    f0 = as_values(mu0)
    f1 = as_values(mu1)
    if np.any(f0 <= 0) or np.any(f1 <= 0):
        raise DegenerateDensityError("endpoints must be strictly positive")
    K = T_steps
    dt = 1.0 / K
    vol = domain.cell_volume
    shape = f0.shape
    ts = np.linspace(0, 1, K + 1)[1:-1]
    s0 = np.array([np.log((1 - t) * f0 + t * f1) for t in ts])

    def densities(s):
        S = s.reshape((K - 1,) + shape)
        out = [f0]
        for sk in S:
            e = np.exp(sk - sk.max())
            out.append(e / (e.sum() * vol))
        out.append(f1)
        return np.array(out)

    def fun(s):
        dens = densities(s)
        a, g, _ = _interval_terms(dens, dt, mobility, graph, domain, True)
        gs = []
        for k in range(1, K):
            fk = dens[k]
            gk = g[k]
            gs.append(fk * (gk - np.sum(gk * fk) * vol))
        return a, np.concatenate([x.ravel() for x in gs])

    if K > 1:
        a0, _ = fun(s0.ravel())
        res = scipy.optimize.minimize(fun, s0.ravel(), jac=True, method="L-BFGS-B",
                                      options={"maxiter": max_iter, "ftol": tol,
                                               "gtol": tol, "maxcor": 30})
        s_opt = res.x
        info = {"iterations": int(res.nit), "converged": bool(res.success),
                "message": str(res.message), "initial_action": float(a0)}
    else:
        s_opt = np.zeros(0)
        info = {"iterations": 0, "converged": True, "message": "single interval"}
    dens = densities(s_opt) if K > 1 else np.array([f0, f1])
    path = path_from_densities(dens, mobility, graph, domain)
    action = kinetic_action(path, mobility, graph, domain)
    info["max_continuity_residual"] = float(path.residuals.max())
    if not info["converged"]:
        log.warning("dynamic_w2 stopped early: %s", info["message"])
    path.info = info
    return action, path


# -- Hamiltonian flows -----------------------------------------------------------

def _check_positive(f, what):
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        bad = np.argwhere(~(f > 0))[0]
        raise DegenerateDensityError(f"{what}: density nonpositive at cell {tuple(int(i) for i in bad)}")


def hamiltonian_rates(f, phi, mobility, graph, domain):
    """``(df/dt, dphi/dt)`` of ``H = 1/2 <phi, phi>_f``.

    ``dphi/dt = -1/2 dx^-d dH/df`` reduces to ``-(1/2 |grad phi|^2 + 1/2 sum K d1theta (D_g phi)^2)``.
    """
    fdot = apply_kinetic(phi, f, mobility, graph, domain)
    phidot = -0.5 * kinetic_density_derivative(phi, f, mobility, graph, domain) / domain.cell_volume
    return fdot, phidot


def geodesic_step(f, phi, dt, mobility, graph, domain):
    """One forward Euler step of the geodesic equations."""
    f = as_values(f)
    phi = np.asarray(phi, dtype=float)
    _check_positive(f, "geodesic_step")
    fdot, phidot = hamiltonian_rates(f, phi, mobility, graph, domain)
    f_new = f + dt * fdot
    _check_positive(f_new, "geodesic_step")
    return f_new, phi + dt * phidot


def second_order_step(f, phi, dt, gamma, pot, mobility, graph, domain):
    """Forward Euler step of the damped system with forcing ``-(gamma phi + log f + V)``."""
    if gamma < 0:
        raise ValueError("damping must be nonnegative")
    f = as_values(f)
    phi = np.asarray(phi, dtype=float)
    _check_positive(f, "second_order_step")
    fdot, phidot = hamiltonian_rates(f, phi, mobility, graph, domain)
    phidot = phidot - (gamma * phi + np.log(f) + pot.V)
    f_new = f + dt * fdot
    _check_positive(f_new, "second_order_step")
    return f_new, phi + dt * phidot


@dataclass
class HamiltonianRun:
    times: np.ndarray
    densities: np.ndarray
    potentials: np.ndarray
    kinetic: np.ndarray
    energies: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def lyapunov(self):
        return 0.5 * self.kinetic + self.energies


def integrate_hamiltonian(f0, phi0, dt, steps, mobility, graph, domain, gamma=None, pot=None,
                          record_every=1):
    """Run geodesic (``gamma is None``) or damped second-order dynamics."""
    f = as_values(f0).copy()
    phi = np.asarray(phi0, dtype=float).copy()
    T, D, P, Kin, E = [], [], [], [], []

    def rec(t):
        T.append(t)
        D.append(f.copy())
        P.append(phi.copy())
        Kin.append(kinetic_energy(phi, f, mobility, graph, domain))
        E.append(entropy(f, pot) if pot is not None else np.nan)

    rec(0.0)
    for k in range(1, steps + 1):
        if gamma is None:
            f, phi = geodesic_step(f, phi, dt, mobility, graph, domain)
        else:
            f, phi = second_order_step(f, phi, dt, gamma, pot, mobility, graph, domain)
        if k % record_every == 0 or k == steps:
            rec(k * dt)
    return HamiltonianRun(np.array(T), np.array(D), np.array(P), np.array(Kin), np.array(E),
                          {"dt": dt, "steps": steps, "gamma": gamma,
                           "mass_drift": abs(integrate(f, domain) - integrate(as_values(f0), domain))})
