from __future__ import annotations

import itertools

import numpy as np
import pytest

from htql.model import OnOffFlow, ReducedSystem, SystemSpec
from htql.manysources import ClassMix


def pareto_flow(r: float, rho: float, nu: float) -> OnOffFlow:
    return OnOffFlow.from_rates(r, rho, nu)


@pytest.fixture
def e4() -> OnOffFlow:
    # r = 1, Pareto(1, 2) On periods (mean 2), Off mean 4 -> p = rho = 1/3
    return pareto_flow(1.0, 1.0 / 3.0, 2.0)


@pytest.fixture
def e1() -> ReducedSystem:
    f = pareto_flow(1.0, 1.0 / 3.0, 2.0)
    return ReducedSystem((f, f), 1.5)


def e2_system(nus=(2.0, 2.2, 1.8)) -> SystemSpec:
    flows = tuple(pareto_flow(r, 0.1, nu) for r, nu in zip((0.3, 0.3, 0.4), nus))
    return SystemSpec(1.0, 0.25, flows)


@pytest.fixture
def e2() -> SystemSpec:
    return e2_system()


@pytest.fixture
def e3() -> SystemSpec:
    return e2_system((2.0, 2.0, 1.8))


@pytest.fixture
def e5() -> ClassMix:
    return ClassMix((0.6, 0.4), (1.5, 1.2), (0.3, 0.2), (1.6, 2.4))


def brute_force_dominant(sys: SystemSpec, tol: float = 1e-9):
    """Reference: scan every subset, keep strictly critical ones of least cost."""
    u = sys.normalized()
    flows = u.heavy_flows
    total = u.total_rate
    best, sets = np.inf, []
    for k in range(len(flows) + 1):
        for S in itertools.combinations(range(len(flows)), k):
            r_S = sum(flows[j].peak_rate for j in S)
            rho_S = sum(flows[j].rho for j in S)
            d = r_S + (total - rho_S) - 1.0
            if d <= tol:
                continue
            mu = sum(flows[j].nu - 1.0 for j in S)
            if mu < best - tol:
                best, sets = mu, [S]
            elif abs(mu - best) <= tol:
                sets.append(S)
    return sorted(sets), best


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or not (rep.when == "call" or rep.failed):
        return
    entry = _CRITERIA.setdefault(m.args[0], [m.args[1], True])
    entry[1] = entry[1] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title}")
