import json

import numpy as np
import pytest

from oracles import quantile_w2
from semidot.domain_fields import GridDomain, equilibrium_density, make_potentials, perturbed_equilibrium
from semidot.graph_core import WeightedGraph
from semidot.static_transport import (AdmissiblePair, InfeasibleError, cost_of_pair, feasibility_residual,
                                      solve_static_cost, target_density, verify_optimality, write_pair)


def _diag_pair(mu, dx, tau, h=None):
    n, m = mu.shape
    plans = np.stack([np.diag(mu[:, g] * dx) for g in range(m)])
    return AdmissiblePair(plans, np.zeros((n, m, m)) if h is None else h, tau)


@pytest.fixture
def small():
    d = GridDomain(1, 2.0, 24)
    pot = make_potentials(d, 2, {"kind": "quadratic", "shift": [0.0, 0.5]})
    return d, pot, WeightedGraph.complete(2)


def test_pair_invariants():
    with pytest.raises(ValueError):
        AdmissiblePair(-np.ones((1, 3, 3)), np.zeros((3, 1, 1)), 0.1)
    h = np.zeros((3, 2, 2))
    h[0, 0, 1] = 1.0
    with pytest.raises(ValueError):
        AdmissiblePair(np.zeros((2, 3, 3)), h, 0.1)
    h[0, 1, 0] = -1.0
    pair = AdmissiblePair(np.zeros((2, 3, 3)), h, 0.1)
    assert AdmissiblePair.from_dict(json.loads(json.dumps(pair.to_dict()))).h.tolist() == h.tolist()


def test_cost_trivial_and_hand_examples():
    d = GridDomain(1, 1.0, 3)        # x = -1, 0, 1 and dx = 1
    G1 = WeightedGraph.complete(1)
    pot1 = make_potentials(d, 1, {"kind": "zero"})
    mu = np.array([[1.0], [0.0], [0.0]])
    assert cost_of_pair(_diag_pair(mu, 1.0, 0.5), pot1, G1, d) == 0.0
    plan = np.zeros((1, 3, 3))
    plan[0, 0, 1] = 1.0
    assert cost_of_pair(AdmissiblePair(plan, np.zeros((3, 1, 1)), 0.5), pot1, G1, d) == pytest.approx(1.0)
    # one exchange entry: tau/4 counted for both orderings
    G = WeightedGraph.complete(2, 1.5)
    pot = make_potentials(d, 2, {"kind": "zero"}, {"kind": "constant", "value": 0.3})
    h = np.zeros((3, 2, 2))
    h[1, 0, 1], h[1, 1, 0] = 2.0, -2.0
    tau = 0.2
    pair = _diag_pair(np.ones((3, 2)), 1.0, tau, h)
    assert cost_of_pair(pair, pot, G, d) == pytest.approx(0.5 * tau * 4.0 * 1.5 * np.exp(-0.3) * 1.0, rel=1e-14)


def test_plan_term_multiplicity_scales_transport_part(small):
    d, pot, G = small
    rng = np.random.default_rng(0)
    mu = perturbed_equilibrium(pot, rng).values
    sig = perturbed_equilibrium(pot, rng).values
    res = solve_static_cost(mu, sig, 0.1, pot, G, d)
    c1 = cost_of_pair(res.pair, pot, G, d, 1)
    c2 = cost_of_pair(res.pair, pot, G, d, 2)
    exch = cost_of_pair(AdmissiblePair(np.zeros_like(res.pair.plans), res.pair.h, 0.1), pot, G, d)
    assert c2 - exch == pytest.approx(2 * (c1 - exch), rel=1e-12)


def test_feasibility_residual_examples():
    d = GridDomain(1, 1.0, 5)
    G = WeightedGraph.complete(2, 2.0)
    pot = make_potentials(d, 2, {"kind": "zero"}, {"kind": "constant", "value": 0.4})
    mu = np.full((5, 2), 0.25)
    tau = 0.1
    assert feasibility_residual(_diag_pair(mu, d.dx, tau), mu, mu, pot, G, d) == 0.0
    eps = 1e-3
    h = np.zeros((5, 2, 2))
    h[2, 0, 1], h[2, 1, 0] = eps, -eps
    r = feasibility_residual(_diag_pair(mu, d.dx, tau, h), mu, mu, pot, G, d)
    assert r == pytest.approx(tau * 2.0 * np.exp(-0.4) * eps, rel=1e-12)
    # total mass per cell must match: moving mass in one fiber only breaks it
    plans = np.stack([np.diag(mu[:, g] * d.dx) for g in range(2)])
    plans[0, 0, 0], plans[0, 0, 1] = 0.0, mu[0, 0] * d.dx
    bad = AdmissiblePair(plans, np.zeros((5, 2, 2)), tau)
    assert feasibility_residual(bad, mu, mu, pot, G, d) > 0
    # the exchange term sums to zero over nodes
    tgt = target_density(_diag_pair(mu, d.dx, tau, h), G, pot, d)
    np.testing.assert_allclose(tgt.sum(axis=1), mu.sum(axis=1), atol=1e-15)


def test_identity_has_zero_cost(small):
    d, pot, G = small
    mu = perturbed_equilibrium(pot, np.random.default_rng(1)).values
    res = solve_static_cost(mu, mu, 0.1, pot, G, d)
    assert res.cost <= 1e-14
    assert np.abs(res.pair.h).max() <= 1e-10
    for g in range(2):
        off = res.pair.plans[g] - np.diag(np.diag(res.pair.plans[g]))
        assert np.abs(off).max() <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_single_fiber_matches_quantile_oracle(seed):
    d = GridDomain(1, 2.0, 32)
    pot = make_potentials(d, 1, {"kind": "quadratic"})
    G = WeightedGraph.complete(1)
    rng = np.random.default_rng(seed)
    mu = perturbed_equilibrium(pot, rng, 0.6).values
    sig = perturbed_equilibrium(pot, rng, 0.6).values
    tau = 0.07
    res = solve_static_cost(mu, sig, tau, pot, G, d)
    oracle = quantile_w2(mu[:, 0], sig[:, 0], d.left_edges[0], d.dx) / (2 * tau)
    assert res.cost == pytest.approx(oracle, rel=1e-6)


def _pure_exchange(tau, a=0.8, b=0.3, K=1.5, W=0.2):
    d = GridDomain(1, 1.5, 16)
    G = WeightedGraph.complete(2, K)
    pot = make_potentials(d, 2, {"kind": "zero"}, {"kind": "constant", "value": W})
    c = 1.0 / (d.n * d.dx)
    mu = np.stack([np.full(d.n, a * c), np.full(d.n, (1 - a) * c)], axis=1)
    sig = np.stack([np.full(d.n, b * c), np.full(d.n, (1 - b) * c)], axis=1)
    res = solve_static_cost(mu, sig, tau, pot, G, d, tol=1e-10)
    # per cell r = (a - b) c leaves node 1; balance r = tau K e^{-W} h; cost (tau/4) 2 h^2 K e^{-W} dx
    h = (a - b) * c / (tau * K * np.exp(-W))
    closed = d.n * 0.25 * tau * 2 * h * h * K * np.exp(-W) * d.dx
    return res, closed, h


def test_pure_exchange_closed_form():
    res, closed, h = _pure_exchange(0.1)
    assert res.cost == pytest.approx(closed, rel=1e-8)
    np.testing.assert_allclose(res.pair.h[:, 0, 1], h, rtol=1e-8)
    for g in range(2):
        off = res.pair.plans[g] - np.diag(np.diag(res.pair.plans[g]))
        assert np.abs(off).max() <= 1e-10


def test_pure_exchange_cost_scales_like_inverse_tau():
    costs = [_pure_exchange(t)[0].cost for t in (0.1, 0.05, 0.025)]
    assert costs[1] / costs[0] == pytest.approx(2.0, rel=1e-8)
    assert costs[2] / costs[1] == pytest.approx(2.0, rel=1e-8)


def test_infeasible_without_exchange():
    d = GridDomain(1, 1.5, 16)
    G = WeightedGraph.from_dict({"nodes": ["a", "b"], "K": [[0, 0], [0, 0]]})
    pot = make_potentials(d, 2, {"kind": "zero"})
    c = 1.0 / (d.n * d.dx)
    mu = np.stack([np.full(d.n, 0.7 * c), np.full(d.n, 0.3 * c)], axis=1)
    sig = mu[:, ::-1].copy()
    with pytest.raises(InfeasibleError):
        solve_static_cost(mu, sig, 0.1, pot, G, d)


def test_solver_output_is_feasible_and_optimal(small):
    d, pot, G = small
    rng = np.random.default_rng(4)
    mu = perturbed_equilibrium(pot, rng, 0.5).values
    sig = perturbed_equilibrium(pot, rng, 0.5).values
    res = solve_static_cost(mu, sig, 0.1, pot, G, d)
    assert res.info["converged"]
    assert res.info["feasibility"] <= 1e-7
    assert np.array_equal(res.pair.h, -np.swapaxes(res.pair.h, 1, 2))
    rep = verify_optimality(res.pair, mu, sig, pot, G, d)
    assert rep.passed, rep.to_dict()
    # a perturbation of the optimal fbar that keeps feasibility costs more
    alt = solve_static_cost(mu, sig, 0.1, pot, G, d, max_iter=1)
    assert alt.cost >= res.cost - 1e-12


def test_cost_invariant_under_node_relabeling():
    d = GridDomain(1, 2.0, 20)
    K = np.array([[0, 1.0, 0.3], [1.0, 0, 2.0], [0.3, 2.0, 0]])
    G = WeightedGraph.from_dict({"nodes": ["a", "b", "c"], "K": K.tolist()})
    pot = make_potentials(d, 3, {"kind": "quadratic", "shift": [0.0, 0.4, -0.2]})
    rng = np.random.default_rng(7)
    mu = perturbed_equilibrium(pot, rng).values
    sig = perturbed_equilibrium(pot, rng).values
    perm = [2, 0, 1]
    potp = make_potentials(d, 3, {"table": pot.V[:, perm].tolist()})
    a = solve_static_cost(mu, sig, 0.1, pot, G, d, tol=1e-10).cost
    b = solve_static_cost(mu[:, perm], sig[:, perm], 0.1, potp, G.permuted(perm), d, tol=1e-10).cost
    assert a == pytest.approx(b, rel=1e-9)


def test_rotational_exchange_fails_cycle_check():
    d = GridDomain(1, 1.0, 5)
    G = WeightedGraph.complete(3)
    pot = make_potentials(d, 3, {"kind": "zero"})
    mu = np.full((5, 3), 1.0 / 6.0)
    h = np.zeros((5, 3, 3))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        h[2, a, b], h[2, b, a] = 1.0, -1.0
    pair = _diag_pair(mu, d.dx, 0.1, h)
    rep = verify_optimality(pair, mu, mu, pot, G, d)
    assert not rep.cycle_consistency["passed"]
    wit = rep.cycle_consistency["witness"]
    assert wit["cell"] == 2 and set(wit["cycle"]) == set(G.nodes)
    assert abs(wit["circulation"]) == pytest.approx(3.0)
    assert not rep.gradient_form["passed"]


def test_crossing_plan_fails_monotonicity():
    d = GridDomain(1, 1.0, 5)
    G = WeightedGraph.complete(1)
    pot = make_potentials(d, 1, {"kind": "zero"})
    plan = np.zeros((1, 5, 5))
    plan[0, 0, 4] = plan[0, 4, 0] = 0.5
    pair = AdmissiblePair(plan, np.zeros((5, 1, 1)), 0.1)
    rep = verify_optimality(pair, None, None, pot, G, d)
    assert not rep.monotonicity["passed"]
    assert rep.monotonicity["witness"] is not None


def test_pair_serialization(tmp_path, small):
    d, pot, G = small
    f = equilibrium_density(pot).values
    pair = _diag_pair(f, d.dx, 0.1)
    write_pair(tmp_path / "p.json", pair, {"cost": 0.0})
    data = json.loads((tmp_path / "p.json").read_text())
    assert data["cost"] == 0.0 and len(data["h_upper"]) == d.n


def test_two_dimensional_rejected():
    d = GridDomain(2, 1.0, 5)
    pot = make_potentials(d, 1, {"kind": "zero"})
    f = equilibrium_density(pot).values
    with pytest.raises(NotImplementedError):
        solve_static_cost(f, f, 0.1, pot, WeightedGraph.complete(1), d)
