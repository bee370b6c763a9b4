"""Run configuration: JSON schema, defaults, validation and object construction."""
from __future__ import annotations

import copy

import jsonschema
import numpy as np

from . import pde_flow
from .domain_fields import (FieldError, GridDomain, SemiDiscreteDensity, barrier_check,
                            barrier_constants, equilibrium_density, load_field, make_potentials,
                            perturbed_equilibrium)
from .graph_core import GraphError, WeightedGraph
from .mobility import Mobility

EXPERIMENTS = ("flow", "jko", "compare", "cost", "dynamic", "geodesic", "check")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_per_node = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_table = {"type": "array", "items": {"oneOf": [_num, {"type": "array", "items": _num}]}}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_density = {"oneOf": [
    _obj({"kind": {"const": "equilibrium"}}, ["kind"]),
    _obj({"kind": {"const": "perturbed"}, "amplitude": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
          "modes": {"type": "integer", "minimum": 1}}, ["kind"]),
    _obj({"kind": {"const": "file"}, "path": {"type": "string"},
          "barrier": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}}, ["kind", "path"]),
    _obj({"kind": {"const": "table"}, "values": _table,
          "barrier": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}}, ["kind", "values"]),
]}

SCHEMA = _obj({
    "experiment": {"enum": list(EXPERIMENTS)},
    "domain": _obj({"dimension": {"enum": [1, 2]}, "L": _pos, "n": {"type": "integer", "minimum": 3}}),
    "graph": {"oneOf": [
        _obj({"kind": {"enum": ["complete", "path"]}, "m": {"type": "integer", "minimum": 1},
              "weight": {"type": "number", "minimum": 0}}, ["kind", "m"]),
        _obj({"nodes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
              "K": {"type": "array", "items": {"type": "array", "items": _num}}}, ["nodes", "K"]),
    ]},
    "potential": _obj({
        "V": {"oneOf": [
            _obj({"kind": {"const": "quadratic"}, "kappa": _num, "center": _per_node, "shift": _per_node},
                 ["kind"]),
            _obj({"kind": {"const": "double_well"}, "a": _num, "b": _num, "tilt": _per_node,
                  "shift": _per_node}, ["kind"]),
            _obj({"kind": {"const": "tilted"}, "slope": _per_node, "kappa": _num, "shift": _per_node},
                 ["kind"]),
            _obj({"kind": {"const": "zero"}, "shift": _per_node}, ["kind"]),
            _obj({"table": _table}, ["table"]),
        ]},
        "W": {"oneOf": [
            _obj({"kind": {"const": "zero"}}, ["kind"]),
            _obj({"kind": {"const": "constant"}, "value": _num}, ["kind"]),
            _obj({"kind": {"const": "quadratic"}, "kappa": _num}, ["kind"]),
            _obj({"table": _table}, ["table"]),
        ]},
    }),
    "mobility": _obj({"kind": {"enum": ["mass_independent", "log_mean"]}}),
    "initial": _density,
    "target": _density,
    "potential_init": {"oneOf": [
        _obj({"kind": {"const": "zero"}}, ["kind"]),
        _obj({"kind": {"const": "affine"}, "slope": _num, "node_offset": _per_node}, ["kind"]),
        _obj({"kind": {"const": "sine"}, "amplitude": _num, "wavenumber": _num,
              "node_offset": _per_node}, ["kind"]),
    ]},
    "numerics": _obj({
        "dt": {"oneOf": [_pos, {"type": "null"}]},
        "T": {"type": "number", "minimum": 0},
        "scheme": {"enum": ["explicit", "semi-implicit"]},
        "record_every": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
        "tau": _pos,
        "taus": {"type": "array", "items": _pos, "minItems": 1},
        "steps": {"type": "integer", "minimum": 0},
        "tol": _pos,
        "max_iter": {"type": "integer", "minimum": 1},
        "dt_ref": _pos,
        "T_steps": {"type": "integer", "minimum": 1},
        "gamma": {"oneOf": [{"type": "number", "minimum": 0}, {"type": "null"}]},
        "samples": {"type": "integer", "minimum": 1},
    }),
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
})

DEFAULTS = {
    "domain": {"dimension": 1, "L": 3.0, "n": 96},
    "graph": {"kind": "complete", "m": 2, "weight": 1.0},
    "potential": {"V": {"kind": "quadratic", "shift": [0.0, 0.5]}, "W": {"kind": "zero"}},
    "mobility": {"kind": "mass_independent"},
    "initial": {"kind": "perturbed", "amplitude": 0.3, "modes": 4},
    "target": {"kind": "perturbed", "amplitude": 0.3, "modes": 4},
    "potential_init": {"kind": "zero"},
    "numerics": {
        "dt": None, "T": 1.0, "scheme": "explicit", "record_every": None,
        "tau": 0.05, "taus": [0.1, 0.05, 0.025], "steps": 4, "tol": 1e-8, "max_iter": 200,
        "dt_ref": 1e-4, "T_steps": 8, "gamma": None, "samples": 1000,
    },
    "seed": 0,
    "output_dir": "semidot-out",
}

# per-experiment overrides of the numeric defaults
EXPERIMENT_DEFAULTS = {
    "compare": {"numerics": {"T": 0.5}},
    "cost": {"domain": {"n": 64}},
    "dynamic": {"domain": {"n": 32}},
    "geodesic": {"numerics": {"dt": 1e-3, "T": 0.2}, "potential_init": {"kind": "sine", "amplitude": 0.1,
                                                                         "wavenumber": 1.0}},
}


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not {"kind", "table", "nodes"} & set(v):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def schema_errors(raw):
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))
    out = []
    for e in errs:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        out.append(f"schema: {where}: {e.message}")
    return out


def effective(raw, experiment=None):
    """Defaults, then experiment defaults, then the user config."""
    exp = experiment or raw.get("experiment")
    cfg = _merge(DEFAULTS, EXPERIMENT_DEFAULTS.get(exp, {}))
    cfg = _merge(cfg, raw)
    cfg["experiment"] = exp
    return cfg


def build_domain(cfg):
    return GridDomain(**cfg["domain"])


def build_graph(cfg):
    g = cfg["graph"]
    if "nodes" in g:
        return WeightedGraph.from_dict(g)
    ctor = WeightedGraph.complete if g["kind"] == "complete" else WeightedGraph.path
    return ctor(g["m"], g.get("weight", 1.0))


def build_potentials(cfg, domain, graph):
    return make_potentials(domain, graph.m, cfg["potential"]["V"], cfg["potential"]["W"])


def build_mobility(cfg, pot):
    return Mobility.from_spec(cfg["mobility"], pot)


def build_density(spec, pot, rng):
    """Returns a :class:`SemiDiscreteDensity` with its declared or measured barrier."""
    kind = spec["kind"]
    if kind == "equilibrium":
        return equilibrium_density(pot)
    if kind == "perturbed":
        return perturbed_equilibrium(pot, rng, spec.get("amplitude", 0.3), spec.get("modes", 4))
    if kind == "file":
        domain, values = load_field(spec["path"])
        if domain != pot.domain or values.shape != pot.V.shape:
            raise FieldError("density file does not match the configured grid and graph")
    else:
        from .domain_fields import _table
        values = _table(spec["values"], pot.domain, pot.m)
    barrier = tuple(spec["barrier"]) if "barrier" in spec else None
    f = SemiDiscreteDensity(values, pot.domain)
    if barrier is None and np.all(f.values > 0):
        barrier = barrier_constants(f, pot)
    return SemiDiscreteDensity(f.values, pot.domain, barrier=barrier)


def build_potential_init(spec, domain, m):
    kind = spec["kind"]
    shape = domain.shape + (m,)
    if kind == "zero":
        return np.zeros(shape)
    off = np.broadcast_to(np.asarray(spec.get("node_offset", 0.0), dtype=float), (m,))
    x = domain.coords[0][..., None]
    if kind == "affine":
        return spec.get("slope", 1.0) * x + off + np.zeros(shape)
    k = spec.get("wavenumber", 1.0)
    return spec.get("amplitude", 0.1) * np.sin(np.pi * k * x / domain.L) + off + np.zeros(shape)


def flow_config(cfg, pot, mobility, graph=None, f0=None):
    num = cfg["numerics"]
    T = num["T"]
    dt = num["dt"] or pde_flow.default_dt(pot, T, graph, mobility, f0)
    rec = num["record_every"]
    if rec is None:
        nsteps = max(int(round(T / dt)), 1)
        rec = max(nsteps // 50, 1)
    return pde_flow.FlowConfig(dt=dt, T=T, scheme=num["scheme"], mobility=mobility, record_every=rec)


def validate(raw, experiment=None):
    """Schema and cross-field diagnostics. Entries starting with ``warning:``
    are advisory; any other entry makes the config invalid."""
    diags = schema_errors(raw)
    if diags:
        return diags
    exp = experiment or raw.get("experiment")
    if exp is None:
        return ["experiment: not given on the command line or in the config"]
    if experiment and raw.get("experiment") not in (None, experiment):
        return [f"experiment: command line says {experiment!r}, config says {raw['experiment']!r}"]
    cfg = effective(raw, exp)
    try:
        domain = build_domain(cfg)
        graph = build_graph(cfg)
        pot = build_potentials(cfg, domain, graph)
        mob = build_mobility(cfg, pot)
    except (FieldError, GraphError, ValueError, TypeError) as exc:
        return [f"model: {exc}"]
    num = cfg["numerics"]
    if exp in ("jko", "compare", "cost") and domain.dimension != 1:
        diags.append(f"domain: experiment {exp!r} supports dimension 1 only")
    f0 = None
    if exp in ("flow", "compare"):
        try:
            f0 = build_density(cfg["initial"], pot, np.random.default_rng(cfg["seed"])).values
            if np.any(f0 <= 0):
                f0 = None
        except (FieldError, OSError, ValueError):
            f0 = None
    if exp == "flow":
        try:
            fc = flow_config(cfg, pot, mob, graph, f0)
            diags += [f"numerics.dt: {d}" for d in fc.diagnostics(pot)]
            if f0 is not None:
                rate = pde_flow.exchange_stiffness(f0, pot, graph, mob)
                if fc.dt * rate > 2:
                    diags.append(f"warning: numerics.dt: dt * exchange stiffness = {fc.dt * rate:.3g} > 2;"
                                 " the explicit exchange update is likely unstable for this initial data")
        except ValueError as exc:
            diags.append(f"numerics: {exc}")
        dt = num["dt"] or pde_flow.default_dt(pot, num["T"], graph, mob, f0)
        if num["T"] > 0 and abs(round(num["T"] / dt) * dt - num["T"]) > 1e-9 * num["T"]:
            diags.append(f"numerics.T: T = {num['T']} is not a multiple of dt = {dt}")
    if exp == "compare" and f0 is not None:
        rate = pde_flow.exchange_stiffness(f0, pot, graph, Mobility.mass_independent(pot))
        if num["dt_ref"] * rate > 2:
            diags.append(f"warning: numerics.dt_ref: dt_ref * exchange stiffness = {num['dt_ref'] * rate:.3g}"
                         " > 2; the reference solution is likely unstable")
    if exp == "compare" and num["dt_ref"] > pde_flow.cfl_limit(pot):
        diags.append(f"numerics.dt_ref: reference step {num['dt_ref']} exceeds the explicit bound "
                     f"0.25*dx^2/(1+max|grad V| dx) = {pde_flow.cfl_limit(pot):.6g}")
    if exp in ("jko", "compare", "cost"):
        taus = num["taus"] if exp == "compare" else [num["tau"]]
        for t in taus:
            if not 0 < t < 0.5:
                diags.append(f"numerics.tau: tau = {t} must lie in (0, 1/2)")
            elif t > 0.1:
                diags.append(f"warning: numerics.tau: tau = {t} exceeds the tested range tau <= 0.1;"
                             " watch the Euler-Lagrange residuals")
    if exp in ("flow", "jko", "compare", "cost", "dynamic", "geodesic"):
        keys = ["initial"] + (["target"] if exp in ("cost", "dynamic") else [])
        for key in keys:
            spec = cfg[key]
            if spec["kind"] not in ("file", "table"):
                continue
            try:
                f = build_density(spec, pot, np.random.default_rng(0))
            except (FieldError, OSError, ValueError) as exc:
                diags.append(f"{key}: {exc}")
                continue
            if np.any(f.values <= 0):
                diags.append(f"{key}: density must satisfy the barrier lam*exp(-V) <= f <= Lam*exp(-V)"
                             " with lam > 0; it vanishes somewhere")
            elif "barrier" in spec:
                rep = barrier_check(f.values, pot, *spec["barrier"])
                if not rep.passed:
                    diags.append(f"{key}: density violates the declared barrier lam*exp(-V) <= f <= "
                                 f"Lam*exp(-V) (ratios in [{rep.min_ratio:.6g}, {rep.max_ratio:.6g}])")
    return diags


def fatal(diags):
    return [d for d in diags if not d.startswith("warning:")]


def schema_help():
    """Human-readable summary of the configuration keys."""
    lines = ["Configuration (JSON). Unknown keys are rejected. Defaults in brackets.", ""]
    lines += [
        "  experiment      one of " + ", ".join(EXPERIMENTS) + " (optional, must match the CLI)",
        "  domain          {dimension [1] (1|2), L [3.0], n [96]} cells at -L + i*2L/(n-1)",
        "  graph           {kind: complete|path, m [2], weight [1.0]} or {nodes: [...], K: [[...]]}",
        "  potential.V     {kind: quadratic, kappa, center, shift}  [quadratic, shift [0, 0.5]]",
        "                  {kind: double_well, a, b, tilt, shift} | {kind: tilted, slope, kappa, shift}",
        "                  {kind: zero, shift} | {table: values of shape (*grid, m)}",
        "  potential.W     {kind: zero|constant(value)|quadratic(kappa)} | {table: values of shape grid}",
        "  mobility        {kind: mass_independent|log_mean}  [mass_independent]",
        "  initial,target  {kind: equilibrium} | {kind: perturbed, amplitude [0.3], modes [4]}",
        "                  | {kind: file, path, barrier: [lam, Lam]} | {kind: table, values, barrier}",
        "  potential_init  {kind: zero|affine(slope, node_offset)|sine(amplitude, wavenumber, node_offset)}",
        "  numerics        dt [auto: 0.8 of the explicit bound], T [1.0], scheme [explicit|semi-implicit],",
        "                  record_every, tau [0.05], taus [[0.1, 0.05, 0.025]], steps [4], tol [1e-8],",
        "                  max_iter [200], dt_ref [1e-4], T_steps [8], gamma [null = geodesic],",
        "                  samples [1000]",
        "                  per experiment: compare T [0.5]; cost n [64]; dynamic n [32];",
        "                  geodesic dt [1e-3], T [0.2], potential_init [sine, amplitude 0.1]",
        "  seed            integer [0]; all random test data derive from it",
        "  output_dir      directory for artifacts [semidot-out]",
    ]
    return "\n".join(lines)
