import numpy as np
import pytest

from gridward.case import parse_case
from gridward.errors import NonConvergence
from gridward.network import build_ybus, solve_powerflow

TWO_BUS = """\
schema gridcase-1

[base]
base_mva 100.0
f_nominal 60.0

[buses]
1 slack 0.0 0.0 1.0 0.0
2 PQ 0.0 0.0 - 0.0

[branches]
1 2 0.0 0.1 0.0 1.0

[machines]
1 5.0 2.0 1.0 0.3 6.0 0.5 50.0 0.02 1.0 0.05 0.2 0.4 10.0 2.0 0.25/0.04 1

[loads]
2 0.5 0.0

[ev_buses]
2

[attack_buses]
2
"""


def test_ybus_structure(case):
    y = build_ybus(case)
    n = len(case.buses)
    assert y.shape == (n, n)
    # lines without taps give a symmetric matrix entry pattern
    assert np.allclose(np.abs(y) > 0, np.abs(y.T) > 0)


def test_ne39_powerflow_converges(case, pf):
    assert pf.mismatch < 1e-8
    assert pf.iterations < 20
    idx = case.bus_index()
    slack = next(b for b in case.buses if b.kind == "slack")
    assert abs(pf.theta[idx[slack.id]]) < 1e-12
    for b in case.buses:
        if b.kind in ("PV", "slack"):
            assert abs(pf.v[idx[b.id]] - b.v_setpoint) < 1e-10
    assert np.all(pf.v > 0.85) and np.all(pf.v < 1.15)


def test_two_bus_analytic():
    """Lossless 2-bus feeder: P = v1 v2 sin(th) / x has a closed form."""
    case = parse_case(TWO_BUS)
    pf = solve_powerflow(case)
    v2 = pf.v[1]
    th = pf.theta[1]
    # power balance at bus 2: injected P through the line equals the load
    p_recv = pf.v[0] * v2 * np.sin(-th) / 0.1
    assert abs(p_recv - 0.5) < 1e-8


def test_infeasible_load_raises():
    bad = TWO_BUS.replace("2 0.5 0.0", "2 60.0 0.0")
    case = parse_case(bad)
    with pytest.raises(NonConvergence):
        solve_powerflow(case)
