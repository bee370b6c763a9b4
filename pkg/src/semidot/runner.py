"""Experiment orchestration with atomic artifacts and a JSON run report."""
from __future__ import annotations

import hashlib
import importlib.metadata
import json
import logging
import os
import platform
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config as C, dynamic_transport as dyn, graph_core, jko, mobility, pde_flow
from . import static_transport as st
from .domain_fields import barrier_check, entropy, equilibrium_density, integrate, perturbed_equilibrium

log = logging.getLogger(__name__)

NUMERICAL_ERRORS = (ArithmeticError, np.linalg.LinAlgError, pde_flow.FlowError, dyn.DegenerateDensityError,
                    st.InfeasibleError, graph_core.DisconnectedGraphError)


class Artifacts:
    """Output directory whose files are written atomically and recorded in a manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def _commit(self, name, writer):
        target = self.root / name
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        os.close(fd)
        try:
            writer(tmp)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        data = target.read_bytes()
        self.files = [f for f in self.files if f["path"] != name]
        self.files.append({"path": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        return target

    def with_path(self, name, writer):
        return self._commit(name, writer)

    def json(self, name, obj):
        text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"
        return self._commit(name, lambda p: Path(p).write_text(text))

    def manifest(self):
        return sorted(self.files, key=lambda f: f["path"])


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


@dataclass
class RunReport:
    experiment: str
    config: dict
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None

    @property
    def passed(self):
        return self.status == "ok" and all(c["passed"] for c in self.checks)

    def check(self, name, passed, value=None, bound=None):
        self.checks.append({"name": name, "passed": bool(passed), "value": value, "bound": bound})
        return bool(passed)

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "status": self.status,
            "passed": self.passed,
            "error": self.error,
            "partial": self.status != "ok",
            "config": self.config,
            "versions": versions(),
            "wall_time_s": self.wall_time,
            "checks": self.checks,
            "files": self.files,
        }


def versions():
    try:
        js = importlib.metadata.version("jsonschema")
    except importlib.metadata.PackageNotFoundError:
        js = "unknown"
    return {"semidot": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "jsonschema": js}


def thread_count():
    try:
        return max(int(os.environ.get("SEMIDOT_THREADS", "1")), 1)
    except ValueError:
        return 1


def fan_out(thunks, workers):
    """Evaluate independent thunks; results keep the input order."""
    if workers <= 1 or len(thunks) <= 1:
        return [t() for t in thunks]
    with ThreadPoolExecutor(max_workers=min(workers, len(thunks))) as pool:
        return list(pool.map(lambda t: t(), thunks))


class Model:
    def __init__(self, cfg):
        self.cfg = cfg
        self.domain = C.build_domain(cfg)
        self.graph = C.build_graph(cfg)
        self.pot = C.build_potentials(cfg, self.domain, self.graph)
        self.mob = C.build_mobility(cfg, self.pot)
        self.rng = np.random.default_rng(cfg["seed"])
        self.num = cfg["numerics"]

    def density(self, key):
        return C.build_density(self.cfg[key], self.pot, self.rng)


# -- experiments -----------------------------------------------------------------

def exp_flow(M, rep, out):
    f0 = M.density("initial")
    fc = C.flow_config(M.cfg, M.pot, M.mob, M.graph, f0.values)
    tr = pde_flow.run(f0.values, fc, M.pot, M.graph)
    out.with_path("trajectory.csv", lambda p: tr.write_csv(p, M.graph.nodes))
    out.json("summary.json", tr.summary())
    rep.check("mass_per_step", tr.info["max_step_mass_change"] <= 1e-12, tr.info["max_step_mass_change"], 1e-12)
    rep.check("energy_nonincreasing", tr.info["max_step_energy_increase"] <= 1e-8,
              tr.info["max_step_energy_increase"], 1e-8)
    if f0.barrier is not None:
        lam, Lam = f0.barrier
        bad = sum(not r.passed for r in pde_flow.barrier_history(tr, M.pot, lam, Lam))
        rep.check("barrier_preserved", bad == 0, bad, 0)
    if M.cfg["initial"]["kind"] == "equilibrium":
        change = float(np.abs(tr.densities[-1] - f0.values).max())
        bound = 1e-8 * float(f0.values.max())
        rep.check("stationary", change <= bound, change, bound)


def _jko_checks(rep, steps, dx, tol, barrier):
    conv = all(s["converged"] for s in steps)
    rep.check("solver_certified", conv, max(s["kkt_residual"] for s in steps), tol)
    ineq = max(s["energy_inequality"] for s in steps)
    rep.check("energy_inequality", ineq <= 1e-10, ineq, 1e-10)
    ex = max(s["el"]["exchange"] for s in steps)
    rep.check("el_exchange", ex <= 1e-5, ex, 1e-5)
    trb = 5 * (dx * dx + tol)
    tr = max(s["el"]["transport"] for s in steps)
    rep.check("el_transport", tr <= trb, tr, trb)
    rep.check("exchange_direction", all(s["exchange_direction_ok"] for s in steps))
    if barrier is not None:
        bad = sum(len(s["barrier"]["violations"]) for s in steps)
        rep.check("barrier_preserved", bad == 0, bad, 0)
        worst = max(s["displacement"]["max"] - s["displacement"]["bound"] for s in steps)
        rep.check("displacement_bound", worst <= 0, worst, 0.0)


def exp_jko(M, rep, out):
    f0 = M.density("initial")
    cfg = jko.JkoConfig(tau=M.num["tau"], steps=M.num["steps"], tol=M.num["tol"], max_iter=M.num["max_iter"])
    tr = jko.jko_run(f0.values, cfg, M.pot, M.graph, M.domain, barrier=f0.barrier)
    out.with_path("jko_trajectory.csv", lambda p: tr.write_csv(p, M.graph.nodes))
    out.json("steps.json", {"tau": cfg.tau, "energies": tr.energies, "steps": tr.info["steps"]})
    if tr.info["steps"]:
        _jko_checks(rep, tr.info["steps"], M.domain.dx, cfg.tol, f0.barrier)


def exp_compare(M, rep, out):
    f0 = M.density("initial")
    table = jko.compare_to_pde(f0.values, M.num["taus"], M.num["T"], M.pot, M.graph, M.domain,
                               dt_ref=M.num["dt_ref"], tol=M.num["tol"],
                               runner=lambda th: fan_out(th, thread_count()))
    out.with_path("error_table.csv", table.write_csv)
    out.json("compare.json", {"rows": table.rows(), "shared_times": table.times,
                              "reference_dt": table.reference_dt, "certified": table.certified})
    e = table.errors
    rep.check("solver_certified", table.certified)
    if len(e) > 1:
        dec = all(e[k + 1] < e[k] for k in range(len(e) - 1))
        rep.check("errors_strictly_decreasing", dec, e, None)
        rep.check("finest_at_most_half_coarsest", e[-1] <= 0.5 * e[0], e[-1] / e[0], 0.5)


def exp_cost(M, rep, out):
    mu = M.density("initial").values
    sigma = M.density("target").values
    res = st.solve_static_cost(mu, sigma, M.num["tau"], M.pot, M.graph, M.domain, tol=M.num["tol"],
                               max_iter=M.num["max_iter"])
    opt = st.verify_optimality(res.pair, mu, sigma, M.pot, M.graph, M.domain, rng=M.rng)
    out.with_path("pair.json", lambda p: st.write_pair(p, res.pair, {"cost": res.cost}))
    out.json("cost.json", {"cost": res.cost, "info": res.info, "optimality": opt.to_dict()})
    rep.check("solver_converged", res.info["converged"], res.info["residual"], M.num["tol"])
    rep.check("feasibility", res.info["feasibility"] <= 1e-8, res.info["feasibility"], 1e-8)
    rep.check("cycle_consistency", opt.cycle_consistency["passed"])
    rep.check("gradient_form", opt.gradient_form["passed"])
    rep.check("monotonicity", opt.monotonicity["passed"])


def exp_dynamic(M, rep, out):
    mu = M.density("initial").values
    nu = M.density("target").values
    action, path = dyn.dynamic_w2(mu, nu, M.mob, M.graph, M.domain, T_steps=M.num["T_steps"])
    self_action, _ = dyn.dynamic_w2(mu, mu, M.mob, M.graph, M.domain, T_steps=M.num["T_steps"])
    out.with_path("path.csv", lambda p: path.write_csv(p, M.domain, M.graph.nodes))
    out.json("action.json", {"action": action, "distance": float(np.sqrt(action)), "self_action": self_action,
                             "info": path.info, "residuals": path.residuals})
    res = float(path.residuals.max())
    rep.check("continuity_residual", res <= 1e-8, res, 1e-8)
    rep.check("self_distance", self_action <= 1e-8, self_action, 1e-8)
    rep.check("optimizer_converged", path.info["converged"])


def _hamiltonian(M, f0, phi0, dt, steps):
    return dyn.integrate_hamiltonian(f0, phi0, dt, steps, M.mob, M.graph, M.domain,
                                     gamma=M.num["gamma"], pot=M.pot, record_every=max(steps // 50, 1))


def exp_geodesic(M, rep, out):
    f0 = M.density("initial").values
    phi0 = C.build_potential_init(M.cfg["potential_init"], M.domain, M.graph.m)
    dt = M.num["dt"] or 1e-3
    steps = int(round(M.num["T"] / dt))
    run = _hamiltonian(M, f0, phi0, dt, steps)
    rows = [{"t": t, "kinetic": k, "energy": e, "lyapunov": l}
            for t, k, e, l in zip(run.times, run.kinetic, run.energies, run.lyapunov)]
    out.json("hamiltonian.json", {"records": rows, "info": run.info})
    out.with_path("densities.csv", lambda p: dyn.DiscretePath(run.times, run.densities, run.potentials,
                                                              run.potentials, np.zeros(len(run.times)))
                  .write_csv(p, M.domain, M.graph.nodes))
    mass = run.info["mass_drift"]
    rep.check("mass_conserved", mass <= 1e-12, mass, 1e-12)
    gamma = M.num["gamma"]
    if gamma:
        rise = float(np.max(np.diff(run.lyapunov), initial=0.0))
        bound = 10 * dt * dt * max(abs(run.lyapunov[0]), 1.0) * max(steps // 50, 1)
        rep.check("lyapunov_nonincreasing", rise <= bound, rise, bound)
    else:
        drift = abs(run.kinetic[-1] - run.kinetic[0])
        if drift <= 1e-12:
            rep.check("kinetic_drift_first_order", True, drift, 1e-12)
        else:
            half = _hamiltonian(M, f0, phi0, dt / 2, 2 * steps)
            ratio = drift / max(abs(half.kinetic[-1] - half.kinetic[0]), 1e-300)
            rep.check("kinetic_drift_first_order", 1.5 <= ratio <= 2.5, ratio, [1.5, 2.5])


def exp_check(M, rep, out):
    """Invariant suite on small instances derived from the configured model."""
    rng = M.rng
    samples = M.num["samples"]
    results = {}
    # graph calculus
    worst_ibp = worst_pois = worst_energy = 0.0
    for _ in range(samples):
        m = int(rng.integers(2, 7))
        K = rng.uniform(0, 1, (m, m)) * (rng.uniform(size=(m, m)) < 0.7)
        K = np.triu(K, 1)
        K = K + K.T
        G = graph_core.WeightedGraph(tuple(str(k) for k in range(m)), K)
        h = rng.standard_normal((m, m))
        phi = rng.standard_normal(m)
        scale = np.abs(h).max() * np.abs(phi).max() * max(K.sum(), 1e-300) + 1e-300
        worst_ibp = max(worst_ibp, graph_core.integration_by_parts_defect(h, phi, G) / scale)
    for _ in range(max(samples // 10, 1)):
        m = int(rng.integers(2, 7))
        K = np.triu(rng.uniform(0.1, 1, (m, m)), 1)
        G = graph_core.WeightedGraph(tuple(str(k) for k in range(m)), K + K.T)
        S = np.triu(rng.uniform(0.5, 2, (m, m)), 1)
        S = S + S.T
        r = rng.standard_normal(m)
        r -= r.mean()
        eta = graph_core.solve_graph_poisson(r, S, G)
        L = graph_core.laplacian_matrix(S, G)
        worst_pois = max(worst_pois, np.abs(-L @ eta - r).max() / np.abs(r).max())
        lam = graph_core.laplacian_spectral_gap(S, G)
        worst_energy = max(worst_energy, graph_core.dirichlet_energy(eta, S, G) - (r @ r) / lam)
    results["graph"] = {"ibp": worst_ibp, "poisson": worst_pois, "energy_excess": worst_energy}
    rep.check("graph_integration_by_parts", worst_ibp <= 1e-12, worst_ibp, 1e-12)
    rep.check("graph_poisson_residual", worst_pois <= 1e-10, worst_pois, 1e-10)
    rep.check("graph_energy_bound", worst_energy <= 1e-12, worst_energy, 1e-12)
    # mobility assumptions
    for kind in ("mass_independent", "log_mean"):
        mob = mobility.Mobility.from_spec({"kind": kind}, M.pot)
        ar = mobility.check_assumptions(mob, rng, samples=samples)
        results[f"mobility_{kind}"] = ar.checks
        rep.check(f"mobility_{kind}", ar.passed)
    # equilibrium and a short flow
    finf = equilibrium_density(M.pot).values
    res = float(np.abs(pde_flow.rhs(finf, M.pot, M.graph, M.mob)).max())
    rep.check("equilibrium_residual", res <= 1e-8 * finf.max(), res, 1e-8 * float(finf.max()))
    f0 = perturbed_equilibrium(M.pot, rng)
    T = 0.1
    tr = pde_flow.run(f0.values, pde_flow.FlowConfig(pde_flow.default_dt(M.pot, T, M.graph, M.mob, f0.values), T, mobility=M.mob),
                      M.pot, M.graph)
    rep.check("flow_mass", tr.info["max_step_mass_change"] <= 1e-12, tr.info["max_step_mass_change"], 1e-12)
    rep.check("flow_energy", tr.info["max_step_energy_increase"] <= 1e-8,
              tr.info["max_step_energy_increase"], 1e-8)
    bad = sum(not r.passed for r in pde_flow.barrier_history(tr, M.pot, *f0.barrier))
    rep.check("flow_barrier", bad == 0, bad, 0)
    # metric axioms on a coarse copy of the model
    from .domain_fields import GridDomain
    small = GridDomain(M.domain.dimension, M.domain.L, 16)
    spot = C.build_potentials(M.cfg, small, M.graph)
    smob = C.build_mobility(M.cfg, spot)
    a, b = (perturbed_equilibrium(spot, rng).values for _ in range(2))
    dab = dyn.dynamic_w2(a, b, smob, M.graph, small, T_steps=4)[0]
    dba = dyn.dynamic_w2(b, a, smob, M.graph, small, T_steps=4)[0]
    daa = dyn.dynamic_w2(a, a, smob, M.graph, small, T_steps=4)[0]
    asym = abs(np.sqrt(dab) - np.sqrt(dba)) / (0.5 * (np.sqrt(dab) + np.sqrt(dba)))
    rep.check("metric_identity", daa <= 1e-8, daa, 1e-8)
    rep.check("metric_symmetry", asym <= 0.02, float(asym), 0.02)
    results["metric"] = {"d_ab": float(np.sqrt(dab)), "d_ba": float(np.sqrt(dba)), "self_action": daa}
    out.json("check.json", results)


EXPERIMENT_FUNCS = {"flow": exp_flow, "jko": exp_jko, "compare": exp_compare, "cost": exp_cost,
                    "dynamic": exp_dynamic, "geodesic": exp_geodesic, "check": exp_check}


def run(cfg, output_dir=None):
    """Run a validated effective config; always writes ``report.json``."""
    out = Artifacts(output_dir or cfg["output_dir"])
    rep = RunReport(cfg["experiment"], cfg)
    t0 = time.perf_counter()
    try:
        EXPERIMENT_FUNCS[cfg["experiment"]](Model(cfg), rep, out)
    except NUMERICAL_ERRORS as exc:
        rep.status = "numerical_failure"
        rep.error = f"{type(exc).__name__}: {exc}"
        log.error("numerical failure: %s", rep.error)
    rep.wall_time = time.perf_counter() - t0
    rep.files = out.manifest()
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n"
    out._commit("report.json", lambda p: Path(p).write_text(text))
    return rep


__all__ = ["Artifacts", "RunReport", "run", "fan_out", "thread_count", "versions"]
