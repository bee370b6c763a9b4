"""Exact quadratic transport between piecewise-constant densities on a 1-D grid.

Each grid value is read as a constant density on its cell, so the monotone
map is piecewise linear and everything (cost, plan, potential gradient and
Hessian with respect to the target) is available in closed form. Cells
``j`` span ``[left + j dx, left + (j+1) dx]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Pieces:
    """Sub-intervals of the quantile axis on which the source cell ``i`` and
    target cell ``j`` are fixed; ``x`` and ``y`` are the endpoint positions."""

    ds: np.ndarray
    i: np.ndarray
    j: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def _cum(p, dx):
    c = np.concatenate(([0.0], np.cumsum(p) * dx))
    return c


def pieces(mu, nu, left, dx):
    """Merge the cumulative distributions of ``mu`` and ``nu``."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    A = _cum(mu, dx)
    B = _cum(nu, dx)
    total = min(A[-1], B[-1])
    knots = np.unique(np.concatenate((A, B)))
    knots = knots[knots <= total]
    s0, s1 = knots[:-1], knots[1:]
    keep = s1 - s0 > 0
    s0, s1 = s0[keep], s1[keep]
    mid = 0.5 * (s0 + s1)
    n = len(mu)
    i = np.clip(np.searchsorted(A, mid, side="right") - 1, 0, n - 1)
    j = np.clip(np.searchsorted(B, mid, side="right") - 1, 0, n - 1)
    edges = left + dx * np.arange(n)

    def pos(cum, dens, k, s):
        return edges[k] + (s - cum[k]) / dens[k]

    return Pieces(s1 - s0, i, j, pos(A, mu, i, s0), pos(A, mu, i, s1),
                  pos(B, nu, j, s0), pos(B, nu, j, s1))


def squared_distance(mu, nu, left, dx):
    """``W_2^2`` between the two cell densities (masses must agree)."""
    p = pieces(mu, nu, left, dx)
    d0 = p.x0 - p.y0
    d1 = p.x1 - p.y1
    return float(np.sum(p.ds * (d0 * d0 + d0 * d1 + d1 * d1)) / 3.0)


@dataclass(frozen=True)
class Coupling:
    cost: float
    plan: np.ndarray
    column_displacement: np.ndarray


def monotone_coupling(mu, nu, left, dx):
    """Cost, cell-to-cell plan (masses) and per-target-cell mass-weighted
    displacement ``sum (x - y)`` of the monotone coupling."""
    n = len(mu)
    p = pieces(mu, nu, left, dx)
    d0 = p.x0 - p.y0
    d1 = p.x1 - p.y1
    cost = float(np.sum(p.ds * (d0 * d0 + d0 * d1 + d1 * d1)) / 3.0)
    plan = np.zeros((n, n))
    np.add.at(plan, (p.i, p.j), p.ds)
    disp = np.zeros(n)
    np.add.at(disp, p.j, p.ds * 0.5 * (d0 + d1))
    return Coupling(cost, plan, disp)


def _target_pieces(mu, nu, left, dx):
    """Pieces in the target variable ``z`` covering every target cell.

    Returns per piece: cell ``j``, ``z0, z1``, the source map ``S`` at both
    ends, and the source density there (``w = 1/mu``). Empty target cells
    get one piece with constant ``S``.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    n = len(nu)
    p = pieces(mu, nu, left, dx)
    edges = left + dx * np.arange(n)
    B = _cum(nu, dx)
    A = _cum(mu, dx)
    cells, z0, z1, S0, S1, dens = [list(p.j)], [list(p.y0)], [list(p.y1)], [list(p.x0)], \
        [list(p.x1)], [list(mu[p.i])]
    empty = np.flatnonzero(nu <= 0)
    if len(empty):
        s = B[empty]
        k = np.clip(np.searchsorted(A, s, side="right") - 1, 0, n - 1)
        # the first positive source cell at or after quantile s
        pos = np.flatnonzero(mu > 0)
        k = pos[np.clip(np.searchsorted(pos, k), 0, len(pos) - 1)]
        x = np.clip(edges[k] + (s - A[k]) / mu[k], edges[k], edges[k] + dx)
        cells.append(list(empty))
        z0.append(list(edges[empty]))
        z1.append(list(edges[empty] + dx))
        S0.append(list(x))
        S1.append(list(x))
        dens.append(list(mu[k]))
    cat = lambda parts: np.concatenate([np.asarray(q, dtype=float) for q in parts])
    j = cat(cells).astype(int)
    a, b = cat(z0), cat(z1)
    order = np.lexsort((a, j))
    return j[order], a[order], b[order], cat(S0)[order], cat(S1)[order], cat(dens)[order]


def potential_gradient(mu, nu, left, dx):
    """Gradient of ``W_2^2 / 2`` with respect to the target cell values.

    With ``S`` the map from the target to the source, ``psi' = z - S(z)``
    and ``psi(left) = 0``; entry ``j`` is ``int_{cell j} psi``. Valid for
    variations preserving the total mass.
    """
    n = len(nu)
    j, z0, z1, S0, S1, _ = _target_pieces(mu, nu, left, dx)
    q0 = z0 - S0
    q1 = z1 - S1
    Lp = z1 - z0
    inc = Lp * 0.5 * (q0 + q1)
    psi0 = np.concatenate(([0.0], np.cumsum(inc)[:-1]))
    contrib = Lp * psi0 + Lp * Lp * (q0 / 3.0 + q1 / 6.0)
    G = np.zeros(n)
    np.add.at(G, j, contrib)
    return G


def potential_hessian(mu, nu, left, dx):
    """Hessian of ``W_2^2 / 2`` in the target cell values.

    The second variation is ``int (dF)^2 / mu(S(z)) dz`` with ``dF`` the
    perturbation of the target distribution function.
    """
    n = len(nu)
    j, z0, z1, _, _, dens = _target_pieces(mu, nu, left, dx)
    w = 1.0 / dens
    edges = left + dx * np.arange(n)
    r0 = z0 - edges[j]
    r1 = z1 - edges[j]
    a = np.zeros(n)
    b = np.zeros(n)
    c = np.zeros(n)
    np.add.at(a, j, w * (r1 - r0))
    np.add.at(b, j, w * 0.5 * (r1 * r1 - r0 * r0))
    np.add.at(c, j, w * (r1 ** 3 - r0 ** 3) / 3.0)
    # dF on cell j is dx * sum_{k<j} e_k + (z - l_j) e_j
    tail = np.concatenate((np.cumsum(a[::-1])[::-1][1:], [0.0]))   # sum_{j > k} a_j
    idx = np.arange(n)
    H = dx * dx * tail[np.maximum.outer(idx, idx)]
    upper = dx * b[None, :] * (idx[:, None] < idx[None, :])
    H += upper + upper.T
    H[idx, idx] += c
    return H


def plan_cost(plan, left, dx):
    """Quadratic cost of a cell-to-cell plan, mass spread uniformly inside cells.

    Each block ``plan[i, j]`` takes the next sub-interval of source cell
    ``i`` (in ``j`` order) to the next sub-interval of target cell ``j`` (in
    ``i`` order) linearly. For monotone plans this is the exact cost of the
    monotone coupling; diagonal plans cost zero.
    """
    P = np.asarray(plan, dtype=float)
    n = P.shape[0]
    edges = left + dx * np.arange(n)
    rows = P.sum(axis=1)
    cols = P.sum(axis=0)
    ii, jj = np.nonzero(P > 0)
    m = P[ii, jj]
    row_before = np.cumsum(P, axis=1) - P
    col_before = np.cumsum(P, axis=0) - P
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = dx * m / rows[ii]
        ly = dx * m / cols[jj]
        x0 = edges[ii] + dx * row_before[ii, jj] / rows[ii]
        y0 = edges[jj] + dx * col_before[ii, jj] / cols[jj]
    d0 = x0 - y0
    dl = lx - ly
    return float(np.sum(m * (d0 * d0 + d0 * dl + dl * dl / 3.0)))
