"""Static two-stage transport on grid x graph.

Mass of ``mu`` first moves along each fiber ``R x {g}`` (plan ``gamma_g``,
quadratic cost ``1/(2 tau)``) to the transported density ``fbar``, then is
exchanged between nodes at each point (field ``h``, cost ``tau/4 K e^{-W}``
per ordered pair). Balance:

    sigma_g = fbar_g - tau sum_g' h_gg' K(g, g') e^{-W}.

Densities are read as constant on grid cells; fiber transport is the exact
1-D monotone coupling of :mod:`semidot.transport1d`. For fixed ``fbar`` the
cheapest exchange is the gradient field of a per-cell graph-Poisson
solution, which leaves a convex problem in ``fbar`` alone that is solved by
constrained Newton iterations. One spatial dimension only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _newton, transport1d
from .domain_fields import as_values
from .graph_core import GraphError, WeightedGraph, solve_graph_poisson


class InfeasibleError(ValueError):
    """No admissible pair exists; the transport cost is +inf."""


@dataclass(frozen=True)
class AdmissiblePair:
    """``plans[g]`` is an ``n x n`` mass matrix, ``h[i]`` an antisymmetric ``m x m`` matrix."""

    plans: np.ndarray
    h: np.ndarray
    tau: float

    def __post_init__(self):
        plans = np.array(self.plans, dtype=float)
        h = np.array(self.h, dtype=float)
        if plans.ndim != 3 or plans.shape[1] != plans.shape[2]:
            raise ValueError("plans must have shape (m, n, n)")
        m, n = plans.shape[0], plans.shape[1]
        if h.shape != (n, m, m):
            raise ValueError(f"h must have shape {(n, m, m)}, got {h.shape}")
        if np.any(plans < 0):
            raise ValueError("plans must be nonnegative")
        if not np.array_equal(h, -np.swapaxes(h, 1, 2)):
            raise ValueError("h must be antisymmetric in the node pair")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for a in (plans, h):
            a.setflags(write=False)
        object.__setattr__(self, "plans", plans)
        object.__setattr__(self, "h", h)

    @property
    def m(self):
        return self.plans.shape[0]

    @property
    def n(self):
        return self.plans.shape[1]

    def to_dict(self):
        iu = np.triu_indices(self.m, 1)
        return {"tau": self.tau, "plans": self.plans.tolist(),
                "h_upper": self.h[:, iu[0], iu[1]].tolist()}

    @classmethod
    def from_dict(cls, data):
        plans = np.asarray(data["plans"], dtype=float)
        m, n = plans.shape[0], plans.shape[1]
        h = np.zeros((n, m, m))
        iu = np.triu_indices(m, 1)
        up = np.asarray(data["h_upper"], dtype=float).reshape(n, -1)
        h[:, iu[0], iu[1]] = up
        h[:, iu[1], iu[0]] = -up
        return cls(plans, h, float(data["tau"]))


def _check_1d(domain):
    if domain.dimension != 1:
        raise NotImplementedError("static transport and JKO are implemented for d = 1")


def _exchange_weight(graph, pot):
    """``K(g, g') e^{-W(x_i)}``, shape ``(n, m, m)``."""
    return graph.kernel[None, :, :] * np.exp(-pot.W)[:, None, None]


def transported_density(pair, domain):
    return pair.plans.sum(axis=1).T / domain.cell_volume


def exchanged_density(pair, graph, pot):
    """``tau sum_g' h_gg' K e^{-W}`` per cell and node."""
    return pair.tau * (pair.h * _exchange_weight(graph, pot)).sum(axis=2)


def target_density(pair, graph, pot, domain):
    return transported_density(pair, domain) - exchanged_density(pair, graph, pot)


def plan_cost(pair, domain):
    left = domain.left_edges[0]
    return sum(transport1d.plan_cost(p, left, domain.dx) for p in pair.plans)


def cost_of_pair(pair, pot, graph, domain, plan_term_multiplicity=1):
    """``mult/(2 tau) sum_g int |x-y|^2 dgamma_g + tau/4 sum_{g,g'} int h^2 K e^{-W}``.

    Plan blocks spread their mass uniformly over both cells, so a diagonal
    plan costs zero.
    """
    _check_1d(domain)
    transport = plan_term_multiplicity * plan_cost(pair, domain) / (2 * pair.tau)
    exch = 0.25 * pair.tau * float((pair.h ** 2 * _exchange_weight(graph, pot)).sum()) * domain.dx
    return transport + exch


def feasibility_residual(pair, mu, sigma, pot, graph, domain):
    """Worst violation of the first-marginal and balance constraints (density units)."""
    mu = as_values(mu)
    sigma = as_values(sigma)
    rows = pair.plans.sum(axis=2).T / domain.cell_volume
    balance = target_density(pair, graph, pot, domain) - sigma
    return float(max(np.abs(rows - mu).max(), np.abs(balance).max()))


# -- exchange elimination -------------------------------------------------------

def _component_laplacians(graph):
    """Per connected component: node index array and pseudo-inverse of ``diag(K 1) - K``."""
    out = []
    for comp in graph.components:
        idx = np.asarray(comp)
        Kc = graph.kernel[np.ix_(idx, idx)]
        L = np.diag(Kc.sum(axis=1)) - Kc
        out.append((idx, np.linalg.pinv(L) if len(idx) > 1 else np.zeros((1, 1))))
    return out


def _laplacian_pinv(graph):
    m = graph.m
    P = np.zeros((m, m))
    for idx, Lp in _component_laplacians(graph):
        P[np.ix_(idx, idx)] = Lp
    return P


def exchange_potential(r, tau, pot, graph):
    """Per-cell potential ``psi`` with ``tau e^{-W} sum_g' (psi_g' - psi_g) K = r``.

    ``r`` must sum to zero over every connected component at every cell;
    the per-cell component mean is removed before solving. Each component
    is solved with the graph-Poisson solver (edge weight ``S = 1/2``);
    ``psi`` has zero mean on every component.
    """
    r = np.asarray(r, dtype=float)
    n, m = r.shape
    psi = np.zeros((n, m))
    scale = tau * np.exp(-pot.W)
    for comp in graph.components:
        idx = np.asarray(comp)
        if len(idx) == 1:
            continue
        sub = WeightedGraph(tuple(graph.nodes[k] for k in idx), graph.kernel[np.ix_(idx, idx)])
        S = np.full((len(idx), len(idx)), 0.5)
        for i in range(n):
            ri = r[i, idx] / scale[i]
            # the balance rows make ri sum to zero; drop the roundoff
            ri = ri - ri.mean()
            psi[i, idx] = solve_graph_poisson(ri, S, sub, rtol=1e-8)
    return psi


def gradient_exchange(psi):
    """``h[i, g, g'] = psi[i, g'] - psi[i, g]``."""
    return psi[:, None, :] - psi[:, :, None]


def _balance_constraints(n, m, graph, block, nvars):
    """Rows ``sum_{g in comp} z[block][i, g] = const`` for every cell and component."""
    rows = []
    for comp in graph.components:
        for i in range(n):
            row = np.zeros(nvars)
            for g in comp:
                row[block + i * m + g] = 1.0
            rows.append(row)
    return rows


def _fiber_mass_constraints(n, m, dx, free_nodes, nvars):
    rows = []
    for g in free_nodes:
        row = np.zeros(nvars)
        row[g:n * m:m] = dx
        rows.append(row)
    return rows


@dataclass
class StaticResult:
    pair: AdmissiblePair
    cost: float
    fbar: np.ndarray
    info: dict = field(default_factory=dict)


def _component_masses(values, graph, dx):
    return np.array([values[:, list(c)].sum() * dx for c in graph.components])


def solve_static_cost(mu, sigma, tau, pot, graph, domain, tol=1e-7,
                      plan_term_multiplicity=1, max_iter=200):
    """Minimal cost over admissible pairs from ``mu`` to ``sigma``.

    Raises :class:`InfeasibleError` when no admissible pair exists (mass
    would have to cross between disconnected parts of the graph).
    """
    _check_1d(domain)
    mu = as_values(mu)
    sigma = as_values(sigma)
    n, m = mu.shape
    dx = domain.dx
    left = domain.left_edges[0]
    if np.any(sigma < 0) or np.any(mu < 0):
        raise ValueError("densities must be nonnegative")
    cm_mu = _component_masses(mu, graph, dx)
    cm_sig = _component_masses(sigma, graph, dx)
    if not np.allclose(cm_mu, cm_sig, rtol=0, atol=1e-10):
        raise InfeasibleError(
            f"component masses differ ({cm_mu} vs {cm_sig}); admissible set is empty, cost = +inf")
    fiber = mu.sum(axis=0) * dx
    free = [g for g in range(m) if fiber[g] > 0]
    # feasible start: spread each component's target profile over its fibers by mass share
    fbar0 = np.zeros((n, m))
    for c, comp in enumerate(graph.components):
        comp = list(comp)
        prof = sigma[:, comp].sum(axis=1) / cm_sig[c]
        for g in comp:
            fbar0[:, g] = fiber[g] * prof
    Lpinv = _laplacian_pinv(graph)
    expW = np.exp(pot.W)
    mult = plan_term_multiplicity
    nvars = n * m

    def fun(z):
        fb = z.reshape(n, m)
        r = fb - sigma
        Lr = r @ Lpinv
        val = 0.5 * dx / tau * float(np.sum(expW[:, None] * r * Lr))
        grad = (dx / tau) * expW[:, None] * Lr
        hess = np.zeros((nvars, nvars))
        for i in range(n):
            sl = slice(i * m, (i + 1) * m)
            hess[sl, sl] = (dx / tau) * expW[i] * Lpinv
        for g in free:
            w2 = transport1d.squared_distance(mu[:, g], fb[:, g], left, dx)
            val += mult * 0.5 * w2 / tau
            grad[:, g] += mult / tau * transport1d.potential_gradient(mu[:, g], fb[:, g], left, dx)
            H = mult / tau * transport1d.potential_hessian(mu[:, g], fb[:, g], left, dx)
            hess[g::m, g::m] += H
        return val, grad.ravel(), hess

    rows = _balance_constraints(n, m, graph, 0, nvars) + _fiber_mass_constraints(n, m, dx, free, nvars)
    fixed = [g for g in range(m) if g not in free]
    for g in fixed:
        for i in range(n):
            row = np.zeros(nvars)
            row[i * m + g] = 1.0
            rows.append(row)
    A = np.array(rows)

    def inside(z):
        fb = z.reshape(n, m)
        return bool(np.all(fb[:, free] > 0))

    res = _newton.minimize(fun, A, fbar0.ravel(), inside, tol, residual_scale=dx, max_iter=max_iter)
    fbar = res.z.reshape(n, m)
    fbar[:, fixed] = 0.0
    pair = _assemble_pair(mu, fbar, sigma, tau, pot, graph, domain)
    cost = cost_of_pair(pair, pot, graph, domain, plan_term_multiplicity)
    info = {"iterations": res.iterations, "converged": res.converged, "residual": res.residual,
            "objective": res.value,
            "feasibility": feasibility_residual(pair, mu, sigma, pot, graph, domain)}
    return StaticResult(pair, cost, fbar, info)


def _assemble_pair(mu, fbar, sigma, tau, pot, graph, domain):
    n, m = mu.shape
    left = domain.left_edges[0]
    plans = np.zeros((m, n, n))
    for g in range(m):
        if mu[:, g].sum() > 0:
            plans[g] = transport1d.monotone_coupling(mu[:, g], fbar[:, g], left, domain.dx).plan
    psi = exchange_potential(fbar - sigma, tau, pot, graph)
    return AdmissiblePair(plans, gradient_exchange(psi), tau)


# -- optimality checks ----------------------------------------------------------

@dataclass
class OptimalityReport:
    cycle_consistency: dict
    gradient_form: dict
    monotonicity: dict

    @property
    def passed(self):
        return (self.cycle_consistency["passed"] and self.gradient_form["passed"]
                and self.monotonicity["passed"])

    def to_dict(self):
        return {"passed": self.passed, "cycle_consistency": self.cycle_consistency,
                "gradient_form": self.gradient_form, "monotonicity": self.monotonicity}


def _spanning_tree(graph):
    """Parent pointers of a BFS forest on ``K > 0``."""
    m = graph.m
    parent = -np.ones(m, dtype=int)
    seen = np.zeros(m, dtype=bool)
    for root in range(m):
        if seen[root]:
            continue
        seen[root] = True
        queue = [root]
        while queue:
            g = queue.pop(0)
            for q in np.flatnonzero(graph.kernel[g] > 0):
                if not seen[q]:
                    seen[q] = True
                    parent[q] = g
                    queue.append(q)
    return parent


def _path_to_root(parent, g):
    path = [g]
    while parent[path[-1]] >= 0:
        path.append(parent[path[-1]])
    return path


def _cycle(parent, a, b):
    """Node cycle closed by the non-tree edge ``(a, b)``."""
    pa = _path_to_root(parent, a)
    pb = _path_to_root(parent, b)
    common = next(x for x in pa if x in set(pb))
    up = pa[:pa.index(common) + 1]
    down = pb[:pb.index(common)][::-1]
    return up + down + [a]


def verify_optimality(pair, mu, sigma, pot, graph, domain, tol=1e-6, rng=None, max_pairs=20000):
    """Structural checks of an optimal pair.

    (a) ``h`` sums to zero around every graph cycle at every cell; (b) ``h``
    is the gradient of a per-cell potential (relative least-squares
    residual); (c) plan supports are cyclically monotone on sampled pairs.
    """
    h = pair.h
    n, m = h.shape[0], h.shape[1]
    parent = _spanning_tree(graph)
    # potentials along the tree, then test every non-tree edge
    psi = np.zeros((n, m))
    order = sorted(range(m), key=lambda g: len(_path_to_root(parent, g)))
    for g in order:
        if parent[g] >= 0:
            psi[:, g] = psi[:, parent[g]] + h[:, parent[g], g]
    scale = max(np.abs(h).max(), 1e-300)
    worst, witness = 0.0, None
    edges = [(a, b) for a in range(m) for b in range(a + 1, m) if graph.kernel[a, b] > 0]
    for a, b in edges:
        if parent[b] == a or parent[a] == b:
            continue
        defect = np.abs(psi[:, b] - psi[:, a] - h[:, a, b])
        i = int(np.argmax(defect))
        if defect[i] > worst:
            worst = float(defect[i])
            witness = {"cell": i, "cycle": [graph.nodes[k] for k in _cycle(parent, a, b)],
                       "circulation": float(psi[i, b] - psi[i, a] - h[i, a, b])}
    passed = worst <= tol * scale
    cycle = {"passed": passed, "worst": worst / scale, "witness": None if passed else witness}
    # least-squares fit h[g, g'] ~ psi[g'] - psi[g] over the edges of the graph
    all_edges = [(a, b) for a in range(m) for b in range(m) if a != b and graph.kernel[a, b] > 0]
    if all_edges:
        D = np.zeros((len(all_edges), m))
        for k, (a, b) in enumerate(all_edges):
            D[k, a] -= 1.0
            D[k, b] += 1.0
        target = np.stack([h[:, a, b] for a, b in all_edges], axis=1)
        coef, *_ = np.linalg.lstsq(D, target.T, rcond=None)
        resid = float(np.abs(D @ coef - target.T).max()) / scale
    else:
        resid = 0.0
    grad_form = {"passed": resid <= tol, "relative_residual": resid}
    # cyclical monotonicity on support pairs
    x = domain.axis
    rng = rng or np.random.default_rng(0)
    worst_mono, mono_witness = 0.0, None
    for g in range(pair.m):
        ii, jj = np.nonzero(pair.plans[g] > 1e-14)
        k = len(ii)
        if k < 2:
            continue
        if k * (k - 1) // 2 <= max_pairs:
            p, q = np.triu_indices(k, 1)
        else:
            p = rng.integers(k, size=max_pairs)
            q = rng.integers(k, size=max_pairs)
        x1, y1, x2, y2 = x[ii[p]], x[jj[p]], x[ii[q]], x[jj[q]]
        gap = (x1 - y1) ** 2 + (x2 - y2) ** 2 - (x1 - y2) ** 2 - (x2 - y1) ** 2
        w = int(np.argmax(gap))
        if gap[w] > worst_mono:
            worst_mono = float(gap[w])
            mono_witness = {"node": graph.nodes[g], "pairs": [[float(x1[w]), float(y1[w])],
                                                              [float(x2[w]), float(y2[w])]]}
    mono = {"passed": worst_mono <= 1e-12, "worst": worst_mono,
            "witness": mono_witness if worst_mono > 1e-12 else None}
    return OptimalityReport(cycle, grad_form, mono)


def displacement_bound(lam, Lam, tau, dx):
    return math.sqrt(2.0) * (math.log(Lam) - math.log(lam)) * math.sqrt(tau) + dx


def max_support_displacement(pair, domain, threshold=1e-12):
    x = domain.axis
    worst = 0.0
    for P in pair.plans:
        ii, jj = np.nonzero(P > threshold)
        if len(ii):
            worst = max(worst, float(np.abs(x[jj] - x[ii]).max()))
    return worst


def write_pair(path, pair, extra=None):
    data = pair.to_dict()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh)


__all__ = ["AdmissiblePair", "StaticResult", "OptimalityReport", "InfeasibleError", "GraphError",
           "cost_of_pair", "feasibility_residual", "solve_static_cost", "verify_optimality",
           "transported_density", "target_density", "exchange_potential", "gradient_exchange",
           "displacement_bound", "max_support_displacement"]
