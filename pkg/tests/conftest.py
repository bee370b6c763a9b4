import numpy as np
import pytest

from semidot.domain_fields import GridDomain, make_potentials
from semidot.graph_core import WeightedGraph


@pytest.fixture
def domain():
    return GridDomain(1, 3.0, 96)


@pytest.fixture
def graph2():
    return WeightedGraph.complete(2, 1.0)


@pytest.fixture
def pot2(domain):
    return make_potentials(domain, 2, {"kind": "quadratic", "shift": [0.0, 0.5]}, {"kind": "zero"})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
