from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from hps_sim.dynamics import assemble_closed_loop, equilibrium
from hps_sim.model import (
    GAIN_NAMES,
    ControllerGains,
    HumanParams,
    LineParams,
    NodeParams,
    ScenarioParams,
    Topology,
    WelfareWeights,
    validate,
)
from hps_sim.scenario import reference_scenario
from hps_sim.workflows import step1_monitor

# lines collected by test_acceptance and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def toy_scenario(N: int = 2, case: str = "i", ports: str = "incremental") -> ScenarioParams:
    """N identical prosumers on a ring (a single line for N = 2)."""
    base = reference_scenario()
    node = NodeParams(C_t=6e-5, L_t=2e-3, R_t=0.04, R_L=17.0, I_Ld=28.0, I_Lq=-20.0, V_r=120 * np.sqrt(2))
    if N == 2:
        inc = np.array([[1.0], [-1.0]])
    else:
        inc = np.zeros((N, N))
        for k in range(N):
            inc[k, k], inc[(k + 1) % N, k] = 1.0, -1.0
    W = 0.3 * (np.abs(inc) @ np.abs(inc).T > 0) * (1 - np.eye(N))
    params = ScenarioParams(
        nodes=[node] * N,
        lines=[LineParams(R_k=0.2, L_k=1.5e-6)] * inc.shape[1],
        topology=Topology(inc, W),
        human=HumanParams(a=np.full(N, 0.5), c=np.full(N, 0.1), d=np.full(N, 0.1),
                          p_ego=np.full(N, 0.9), p_bio=np.full(N, 0.6)),
        weights=WelfareWeights(1.0, 0.2, 0.05, 1.4, 300.0, 1600.0),
        gains=ControllerGains(**{k: np.resize(getattr(base.gains, k), N) for k in GAIN_NAMES}),
        social_case=case,
        ports=ports,
    )
    params = params.replace(monitor=step1_monitor(params))
    return validate(params)


@pytest.fixture(scope="session")
def bundled():
    return reference_scenario("i")


@pytest.fixture(scope="session")
def bundled_ii():
    return reference_scenario("ii")


@pytest.fixture(scope="session")
def bundled_sys(bundled):
    return assemble_closed_loop(bundled)


@pytest.fixture(scope="session")
def bundled_xbar(bundled_sys):
    return equilibrium(bundled_sys)


@pytest.fixture
def toy():
    return toy_scenario()


def with_nodes(params: ScenarioParams, **changes) -> ScenarioParams:
    """Same scenario with every node record updated by *changes*."""
    return params.replace(nodes=tuple(replace(nd, **changes) for nd in params.nodes))
