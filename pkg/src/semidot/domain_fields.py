"""Grid domain, semi-discrete fields and densities, potentials, entropy.

A semi-discrete field is an array of shape ``(*domain.shape, m)``: one
spatial grid function per graph node. Grid point ``x_i = -L + i dx`` is the
centre of a finite-volume cell of volume ``dx**d``; integrals are cell sums.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class GridDomain:
    """Uniform grid on ``[-L, L]^d`` with no-flux boundary."""

    dimension: int = 1
    L: float = 3.0
    n: int = 96

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise FieldError("dimension must be 1 or 2")
        if self.n < 3:
            raise FieldError("need n >= 3 grid points per axis")
        if not self.L > 0:
            raise FieldError("L must be positive")

    @property
    def dx(self):
        return 2.0 * self.L / (self.n - 1)

    @property
    def cell_volume(self):
        return self.dx ** self.dimension

    @property
    def shape(self):
        return (self.n,) * self.dimension

    @property
    def axis(self):
        return np.linspace(-self.L, self.L, self.n)

    @property
    def coords(self):
        """Coordinate arrays, one per axis, each of shape ``self.shape``."""
        return np.meshgrid(*([self.axis] * self.dimension), indexing="ij")

    @property
    def sq_radius(self):
        return sum(c * c for c in self.coords)

    @property
    def left_edges(self):
        """Left cell edges along one axis."""
        return self.axis - 0.5 * self.dx

    def to_dict(self):
        return {"dimension": self.dimension, "L": self.L, "n": self.n}


def field_shape(domain, m):
    return domain.shape + (m,)


def integrate(values, domain):
    return float(np.sum(values) * domain.cell_volume)


def node_masses(values, domain):
    axes = tuple(range(domain.dimension))
    return np.sum(values, axis=axes) * domain.cell_volume


def centered_gradient(u, domain):
    """Spatial gradient, centred inside and one-sided at the boundary.

    Returns an array with a leading axis of length ``d``.
    """
    return np.stack([np.gradient(u, domain.dx, axis=k) for k in range(domain.dimension)])


@dataclass(frozen=True)
class SemiDiscreteDensity:
    """Nonnegative field with unit mass under the cell quadrature."""

    values: np.ndarray
    domain: GridDomain
    barrier: tuple | None = None
    mass_tol: float = 1e-10

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != self.domain.dimension + 1 or v.shape[:-1] != self.domain.shape:
            raise FieldError(f"density shape {v.shape} does not fit domain {self.domain.shape}")
        if not np.all(np.isfinite(v)):
            raise FieldError("density has non-finite entries")
        if np.any(v < 0):
            raise FieldError("density has negative entries")
        total = integrate(v, self.domain)
        if abs(total - 1.0) > self.mass_tol:
            raise FieldError(f"density mass is {total!r}, expected 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self):
        return self.values.shape[-1]

    @classmethod
    def normalized(cls, values, domain, barrier=None):
        v = np.asarray(values, dtype=float)
        return cls(v / integrate(v, domain), domain, barrier)


def as_values(f):
    return f.values if isinstance(f, SemiDiscreteDensity) else np.asarray(f, dtype=float)


@dataclass(frozen=True)
class PotentialPair:
    """Node potential ``V`` (shape ``(*grid, m)``) and mobility weight ``W`` (grid only)."""

    domain: GridDomain
    V: np.ndarray
    W: np.ndarray
    gradV: np.ndarray = field(init=False)
    lam_prime: float = field(init=False)
    Lam_prime: float = field(init=False)
    weight_mass: float = field(init=False)

    def __post_init__(self):
        V = np.array(self.V, dtype=float)
        W = np.array(self.W, dtype=float)
        d = self.domain
        if V.ndim != d.dimension + 1 or V.shape[:-1] != d.shape:
            raise FieldError(f"V has shape {V.shape}, domain is {d.shape}")
        if W.shape != d.shape:
            raise FieldError(f"W has shape {W.shape}, domain is {d.shape}")
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(W))):
            raise FieldError("potentials must be finite")
        for a in (V, W):
            a.setflags(write=False)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "W", W)
        gv = centered_gradient(V, d)
        gv.setflags(write=False)
        object.__setattr__(self, "gradV", gv)
        # lam' e^{-W} <= e^{-V} <= Lam' e^{-W}
        ratio = W[..., None] - V
        object.__setattr__(self, "lam_prime", float(np.exp(ratio.min())))
        object.__setattr__(self, "Lam_prime", float(np.exp(ratio.max())))
        object.__setattr__(self, "weight_mass", integrate(np.exp(-W), d))

    @property
    def m(self):
        return self.V.shape[-1]


def _per_node(value, m, name):
    a = np.broadcast_to(np.asarray(value, dtype=float), (m,))
    if not np.all(np.isfinite(a)):
        raise FieldError(f"{name} must be finite")
    return np.array(a)


def _table(values, domain, m=None):
    a = np.asarray(values, dtype=float)
    shape = domain.shape if m is None else field_shape(domain, m)
    try:
        return a.reshape(shape)
    except ValueError as exc:
        raise FieldError(f"table of size {a.size} does not fit shape {shape}") from exc


def potential_V(spec, domain, m):
    """Build ``V`` from a catalog entry or a table.

    Catalog kinds (``shift`` is a per-node additive constant):

    * ``quadratic``: ``kappa/2 |x - c_g e_1|^2``
    * ``double_well``: ``a (|x|^2 - b^2)^2 + tilt x_1``
    * ``tilted``: ``slope x_1 + kappa/2 |x|^2``
    * ``zero``
    """
    if "table" in spec:
        return _table(spec["table"], domain, m)
    kind = spec.get("kind", "quadratic")
    X = domain.coords
    shift = _per_node(spec.get("shift", 0.0), m, "shift")
    if kind == "quadratic":
        kappa = float(spec.get("kappa", 1.0))
        center = _per_node(spec.get("center", 0.0), m, "center")
        r2 = sum(c * c for c in X[1:]) if domain.dimension > 1 else 0.0
        base = 0.5 * kappa * ((X[0][..., None] - center) ** 2 + np.asarray(r2)[..., None])
        return base + shift
    if kind == "double_well":
        a = float(spec.get("a", 0.25))
        b = float(spec.get("b", 1.0))
        tilt = _per_node(spec.get("tilt", 0.0), m, "tilt")
        r2 = domain.sq_radius
        return (a * (r2 - b * b) ** 2)[..., None] + tilt * X[0][..., None] + shift
    if kind == "tilted":
        slope = _per_node(spec.get("slope", 1.0), m, "slope")
        kappa = float(spec.get("kappa", 0.0))
        return slope * X[0][..., None] + (0.5 * kappa * domain.sq_radius)[..., None] + shift
    if kind == "zero":
        return np.zeros(field_shape(domain, m)) + shift
    raise FieldError(f"unknown potential kind {kind!r}")


def potential_W(spec, domain):
    if spec is None:
        return np.zeros(domain.shape)
    if "table" in spec:
        return _table(spec["table"], domain)
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return np.zeros(domain.shape)
    if kind == "constant":
        return np.full(domain.shape, float(spec.get("value", 0.0)))
    if kind == "quadratic":
        return 0.5 * float(spec.get("kappa", 1.0)) * domain.sq_radius
    raise FieldError(f"unknown W kind {kind!r}")


def make_potentials(domain, m, V_spec=None, W_spec=None):
    V = potential_V(V_spec or {"kind": "quadratic"}, domain, m)
    return PotentialPair(domain, V, potential_W(W_spec, domain))


def entropy(f, pot):
    """``sum (f log f + V f) dx^d`` with ``0 log 0 = 0``."""
    v = as_values(f)
    if np.any(np.isnan(v)):
        raise FieldError("density contains NaN")
    flogf = np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)
    return integrate(flogf + pot.V * v, pot.domain)


def equilibrium_density(pot, graph=None):
    """Normalized ``c exp(-V)``."""
    u = np.exp(-(pot.V - pot.V.min()))
    c = 1.0 / integrate(u, pot.domain)
    f = SemiDiscreteDensity(c * u, pot.domain)
    level = c * np.exp(pot.V.min())
    return SemiDiscreteDensity(f.values, pot.domain, barrier=(level, level))


@dataclass(frozen=True)
class BarrierReport:
    lam: float
    Lam: float
    min_ratio: float
    max_ratio: float
    passed: bool
    violations: tuple
    rtol: float

    @property
    def margins(self):
        return {"lower": self.min_ratio / self.lam - 1.0, "upper": 1.0 - self.max_ratio / self.Lam}


def barrier_check(f, pot, lam, Lam, rtol=1e-12, max_report=10):
    """Check ``lam e^{-V} <= f <= Lam e^{-V}`` cell by cell.

    ``violations`` lists ``(cell index, node, ratio)`` for the worst cells.
    """
    v = as_values(f)
    ratio = v * np.exp(pot.V)
    low = ratio < lam * (1 - rtol)
    high = ratio > Lam * (1 + rtol)
    bad = np.argwhere(low | high)
    dev = np.maximum(lam - ratio, ratio - Lam)[tuple(bad.T)] if len(bad) else np.array([])
    order = np.argsort(-dev)[:max_report]
    viol = tuple((tuple(int(k) for k in bad[o][:-1]), int(bad[o][-1]), float(ratio[tuple(bad[o])]))
                 for o in order)
    return BarrierReport(float(lam), float(Lam), float(ratio.min()), float(ratio.max()),
                         len(bad) == 0, viol, rtol)


def barrier_constants(f, pot):
    """Tightest ``(lam, Lam)`` for ``f``."""
    ratio = as_values(f) * np.exp(pot.V)
    return float(ratio.min()), float(ratio.max())


def second_moment(f, domain):
    v = as_values(f)
    return integrate(domain.sq_radius[..., None] * v, domain)


def perturbed_equilibrium(pot, rng, amplitude=0.3, modes=4):
    """Barrier-satisfying random data ``c e^{-V} (1 + a s(x, g))`` with ``|s| <= 1``."""
    d = pot.domain
    m = pot.m
    X = d.coords
    s = np.zeros(field_shape(d, m))
    for _ in range(modes):
        k = rng.uniform(0.3, 2.0, size=d.dimension)
        phase = rng.uniform(0, 2 * np.pi)
        w = rng.uniform(-1, 1, size=m)
        arg = sum(kk * xx for kk, xx in zip(k, X)) + phase
        s += np.sin(arg)[..., None] * w
    s /= max(np.abs(s).max(), 1e-300)
    node = rng.uniform(0.5, 1.5, size=m)
    u = np.exp(-(pot.V - pot.V.min())) * node * (1 + amplitude * s)
    f = SemiDiscreteDensity.normalized(u, d)
    return SemiDiscreteDensity(f.values, d, barrier=barrier_constants(f, pot))


# -- I/O --------------------------------------------------------------------

def field_to_json(values, domain):
    v = np.asarray(values)
    return {"domain": domain.to_dict(), "graph_nodes": int(v.shape[-1]),
            "values": v.reshape(-1, v.shape[-1]).tolist()}


def field_from_json(data):
    domain = GridDomain(**data["domain"])
    m = int(data["graph_nodes"])
    return domain, _table(data["values"], domain, m)


def load_field(path):
    return field_from_json(json.loads(Path(path).read_text()))


def write_density_csv(path, values, domain, nodes, t=None):
    """Rows ``(t,) x.., g, f`` in C order."""
    v = np.asarray(values)
    X = [c.ravel() for c in domain.coords]
    flat = v.reshape(-1, v.shape[-1])
    xnames = ["x"] if domain.dimension == 1 else ["x", "y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["t"] if t is not None else []) + xnames + ["g", "f"])
        for i in range(flat.shape[0]):
            for g, name in enumerate(nodes):
                row = [repr(float(c[i])) for c in X] + [name, repr(float(flat[i, g]))]
                w.writerow(([repr(float(t))] if t is not None else []) + row)
