"""Session-scoped pipeline fixtures shared across the test modules.

The ne39 pipeline (power flow -> dynamics -> linearization -> reduction
-> synthesis) is expensive enough to build once and reuse; everything
here is deterministic.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from gridward.attacks import identify_target_mode
from gridward.case import load_case
from gridward.dynamics import init_dynamics
from gridward.linearize import find_equilibrium, linearize_model
from gridward.mitigation import FleetModel, fleet_capacity
from gridward.modred import balanced_truncate
from gridward.network import solve_powerflow
from gridward.scenario import DEFAULT_A1, DEFAULT_GAIN_BOUND
from gridward.synth import (
    SynthesisArtifacts,
    design_observer,
    disturbance_weighted_q,
    hinf_synthesize,
)


# Per-criterion pass/fail lines recorded by tests/test_acceptance.py and
# echoed after the run summary so they are visible without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case():
    return load_case("ne39")


@pytest.fixture(scope="session")
def pf(case):
    return solve_powerflow(case)


@pytest.fixture(scope="session")
def plant(case, pf):
    model, x0 = init_dynamics(case, pf)
    eq = find_equilibrium(model, x0)
    return model, eq


@pytest.fixture(scope="session")
def ssm(case, plant):
    model, eq = plant
    return linearize_model(case, model, eq)


@pytest.fixture(scope="session")
def case_off(case):
    return case.with_pss(False)


@pytest.fixture(scope="session")
def plant_off(case_off):
    pf_off = solve_powerflow(case_off)
    model, x0 = init_dynamics(case_off, pf_off)
    eq = find_equilibrium(model, x0)
    return model, eq


@pytest.fixture(scope="session")
def ssm_off(case_off, plant_off):
    model, eq = plant_off
    return linearize_model(case_off, model, eq)


@pytest.fixture(scope="session")
def reduced(ssm):
    return balanced_truncate(ssm, energy=0.999)


@pytest.fixture(scope="session")
def synth_timing():
    return {}


@pytest.fixture(scope="session")
def hinf_sol(reduced, synth_timing):
    t0 = time.perf_counter()
    sol = hinf_synthesize(reduced.ssm, a1=DEFAULT_A1, gain_bound=DEFAULT_GAIN_BOUND)
    synth_timing["sdp_s"] = time.perf_counter() - t0
    return sol


@pytest.fixture(scope="session")
def observer(case, reduced, hinf_sol):
    w_cols = [
        reduced.ssm.disturbance_labels.index(f"dP@{b}") for b in case.attack_buses
    ]
    return design_observer(
        reduced.ssm,
        hinf_sol.k_mit,
        q_weight=disturbance_weighted_q(reduced.ssm, w_cols),
    )


@pytest.fixture(scope="session")
def artifacts(reduced, observer, hinf_sol):
    return SynthesisArtifacts(reduced, observer, hinf_sol)


@pytest.fixture(scope="session")
def target_mode(ssm):
    return identify_target_mode(ssm)


@pytest.fixture(scope="session")
def fleet_mw():
    return fleet_capacity(FleetModel())["capacity_mw"]
