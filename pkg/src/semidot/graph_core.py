"""Weighted graphs and discrete calculus on their node sets.

Node functions are 1-D arrays of length ``m``. Edge fields are ``m x m``
arrays indexed ``h[g, g']``. All operations are pure functions of
immutable inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg


class GraphError(ValueError):
    """Invalid graph data or an operation not defined for the given graph."""


class DisconnectedGraphError(GraphError):
    """Raised when an operation needs a connected (effective) graph."""

    def __init__(self, message, components):
        super().__init__(message)
        self.components = components


def connected_components(adjacency):
    """Return the connected components of ``adjacency > 0`` as sorted lists."""
    a = np.asarray(adjacency) > 0
    m = a.shape[0]
    label = -np.ones(m, dtype=int)
    comps = []
    for start in range(m):
        if label[start] >= 0:
            continue
        stack = [start]
        label[start] = len(comps)
        members = []
        while stack:
            g = stack.pop()
            members.append(g)
            for h in np.flatnonzero(a[g]):
                if label[h] < 0:
                    label[h] = len(comps)
                    stack.append(int(h))
        comps.append(sorted(members))
    return comps


@dataclass(frozen=True)
class WeightedGraph:
    """Finite node set with a symmetric, nonnegative, zero-diagonal kernel K.

    Disconnected kernels (including K = 0) are accepted; ``connected``
    records the result of the connectivity check and operations that need
    connectivity raise :class:`DisconnectedGraphError`.
    """

    nodes: tuple
    kernel: np.ndarray
    connected: bool = field(init=False)
    components: tuple = field(init=False)

    def __post_init__(self):
        K = np.array(self.kernel, dtype=float)
        nodes = tuple(str(n) for n in self.nodes)
        m = len(nodes)
        if m < 1:
            raise GraphError("graph needs at least one node")
        if len(set(nodes)) != m:
            raise GraphError("node labels must be unique")
        if K.shape != (m, m):
            raise GraphError(f"kernel shape {K.shape} does not match {m} nodes")
        if not np.all(np.isfinite(K)):
            raise GraphError("kernel has non-finite entries")
        if np.any(K < 0):
            raise GraphError("kernel has negative entries")
        if np.any(np.diag(K) != 0):
            raise GraphError("kernel diagonal must be zero")
        if not np.array_equal(K, K.T):
            raise GraphError("kernel must be exactly symmetric")
        K.setflags(write=False)
        comps = connected_components(K)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "kernel", K)
        object.__setattr__(self, "components", tuple(tuple(c) for c in comps))
        object.__setattr__(self, "connected", len(comps) == 1)

    @property
    def m(self):
        return len(self.nodes)

    @classmethod
    def complete(cls, m, weight=1.0):
        K = np.full((m, m), float(weight))
        np.fill_diagonal(K, 0.0)
        return cls(tuple(f"g{k + 1}" for k in range(m)), K)

    @classmethod
    def path(cls, m, weight=1.0):
        K = np.zeros((m, m))
        idx = np.arange(m - 1)
        K[idx, idx + 1] = K[idx + 1, idx] = weight
        return cls(tuple(f"g{k + 1}" for k in range(m)), K)

    @classmethod
    def from_dict(cls, data):
        try:
            nodes, K = data["nodes"], data["K"]
        except (KeyError, TypeError) as exc:
            raise GraphError("graph JSON needs 'nodes' and 'K'") from exc
        return cls(tuple(nodes), np.asarray(K, dtype=float))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return {"nodes": list(self.nodes), "K": self.kernel.tolist()}

    def permuted(self, perm):
        """Relabel nodes: new node k is old node ``perm[k]``."""
        perm = np.asarray(perm)
        return WeightedGraph(tuple(self.nodes[p] for p in perm),
                             self.kernel[np.ix_(perm, perm)])


@dataclass(frozen=True)
class EdgeField:
    """Values on ordered node pairs, ``values[g, g']``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise GraphError("edge field must be a square matrix")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def antisymmetric(self):
        return bool(np.array_equal(self.values, -self.values.T))


def _node_values(phi, graph):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (graph.m,):
        raise GraphError(f"node function has shape {phi.shape}, graph has {graph.m} nodes")
    return phi


def _edge_values(h, graph):
    v = h.values if isinstance(h, EdgeField) else np.asarray(h, dtype=float)
    if v.shape != (graph.m, graph.m):
        raise GraphError(f"edge field has shape {v.shape}, graph has {graph.m} nodes")
    return v


def discrete_gradient(phi, graph):
    """``grad phi[g, g'] = phi[g'] - phi[g]``."""
    phi = _node_values(phi, graph)
    return EdgeField(phi[None, :] - phi[:, None])


def discrete_divergence(h, graph):
    """``div h[g] = sum_g' (h[g, g'] - h[g', g]) K[g, g']``."""
    v = _edge_values(h, graph)
    return ((v - v.T) * graph.kernel).sum(axis=1)


def integration_by_parts_defect(h, phi, graph):
    v = _edge_values(h, graph)
    phi = _node_values(phi, graph)
    lhs = discrete_divergence(v, graph) @ phi
    rhs = (v * discrete_gradient(phi, graph).values * graph.kernel).sum()
    return abs(lhs + rhs)


def _weights(S, graph):
    """Effective symmetric edge weights ``S * K`` after validating S."""
    if np.ndim(S) == 0:
        S = np.full((graph.m, graph.m), float(S))
    s = _edge_values(S, graph)
    if not np.array_equal(s, s.T):
        raise GraphError("S must be symmetric")
    K = graph.kernel
    if np.any(s[K > 0] <= 0) or np.any(s < 0):
        raise GraphError("S must be nonnegative and positive wherever K > 0")
    return s * K


def laplacian_matrix(S, graph):
    """``L_S = diag(sum 2 S K) - 2 S K``."""
    A = 2.0 * _weights(S, graph)
    return np.diag(A.sum(axis=1)) - A


def _require_connected(A, what):
    comps = connected_components(A)
    if len(comps) > 1:
        raise DisconnectedGraphError(
            f"{what}: effective graph S*K is disconnected, components {comps}", comps)


def laplacian_spectral_gap(S, graph):
    """First nonzero eigenvalue of ``L_S``."""
    L = laplacian_matrix(S, graph)
    if graph.m == 1:
        raise DisconnectedGraphError("spectral gap undefined on a single node", [[0]])
    _require_connected(-L + np.diag(np.diag(L)), "laplacian_spectral_gap")
    return float(scipy.linalg.eigvalsh(L)[1])


def solve_graph_poisson(rhs, S, graph, rtol=1e-10):
    """Zero-mean solution of ``div_g(grad_g eta * S) = rhs``.

    The left side equals ``-L_S eta``; the constant mode is deflated by a
    rank-one shift before a Cholesky solve.
    """
    rhs = _node_values(rhs, graph)
    scale = np.abs(rhs).max(initial=0.0)
    if abs(rhs.sum()) > rtol * max(scale, np.finfo(float).tiny) and scale > 0:
        raise GraphError(f"rhs must sum to zero (sum = {rhs.sum():.3e})")
    if scale == 0:
        return np.zeros(graph.m)
    L = laplacian_matrix(S, graph)
    _require_connected(-L + np.diag(np.diag(L)), "solve_graph_poisson")
    m = graph.m
    shift = np.trace(L) / m
    eta = scipy.linalg.solve(L + shift / m * np.ones((m, m)), -rhs, assume_a="pos")
    return eta - eta.mean()


def dirichlet_energy(eta, S, graph):
    """``sum_{g,g'} |grad eta|^2 S K``."""
    w = _weights(S, graph)
    d = discrete_gradient(eta, graph).values
    return float((d * d * w).sum())
