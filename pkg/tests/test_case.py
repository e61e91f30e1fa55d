import pytest

from gridward.case import load_case, parse_case, serialize_case
from gridward.errors import (
    CaseFormatError,
    DuplicateBusId,
    InvariantViolation,
    NoSlackBus,
    UnknownBusRef,
)

MINI = """\
schema gridcase-1

[base]
base_mva 100.0
f_nominal 60.0

[buses]
1 slack 0.0 0.0 1.0 0.0
2 PQ 1.0 0.2 - 0.0

[branches]
1 2 0.01 0.1 0.0 1.0

[machines]
1 5.0 2.0 1.0 0.3 6.0 1.0 50.0 0.02 1.0 0.05 0.2 0.4 10.0 2.0 0.25/0.04 1

[loads]
2 0.5 0.1

[ev_buses]
2

[attack_buses]
2
"""


def test_roundtrip_ne39(case):
    text = serialize_case(case)
    again = parse_case(text)
    assert serialize_case(again) == text


def test_ne39_shape(case):
    assert len(case.buses) == 39
    assert len(case.machines) == 10
    assert len(case.loads) == 19
    assert case.attack_buses == (3, 4, 24, 29)
    assert len(case.ev_buses) == 19
    assert abs(case.total_load_mw() - 6097.1) < 0.5


def test_seventeen_field_machine_row_defaults_agc_off():
    case = parse_case(MINI)
    m = case.machines[0]
    assert not m.agc.enabled
    assert m.agc.k_i == 0.0
    assert m.pss.enabled
    assert m.pss.t_1 == 0.25 and m.pss.t_2 == 0.04


def test_with_pss_and_agc_toggles(case):
    off = case.with_pss(False)
    assert all(not m.pss.enabled for m in off.machines)
    assert all(m.pss.enabled for m in case.machines)
    agc_off = case.with_agc(False)
    assert all(not m.agc.enabled for m in agc_off.machines)


def test_with_ev_buses(case):
    trimmed = case.with_ev_buses(b for b in case.ev_buses if b not in case.attack_buses)
    assert len(trimmed.ev_buses) == 15
    assert not set(trimmed.ev_buses) & set(case.attack_buses)


def test_duplicate_bus_rejected():
    bad = MINI.replace("2 PQ 1.0", "1 PQ 1.0", 1)
    with pytest.raises(DuplicateBusId):
        parse_case(bad)


def test_missing_slack_rejected():
    bad = MINI.replace("1 slack 0.0 0.0 1.0 0.0", "1 PQ 0.0 0.0 - 0.0", 1)
    with pytest.raises(NoSlackBus):
        parse_case(bad)


def test_unknown_branch_bus_rejected():
    bad = MINI.replace("1 2 0.01", "1 9 0.01", 1)
    with pytest.raises(UnknownBusRef):
        parse_case(bad)


def test_bad_machine_invariant_rejected():
    bad = MINI.replace("1 5.0 2.0 1.0 0.3", "1 5.0 2.0 0.2 0.3", 1)  # x_d < x_d'
    with pytest.raises(InvariantViolation):
        parse_case(bad)


def test_ev_bus_must_carry_load():
    bad = MINI.replace("[ev_buses]\n2", "[ev_buses]\n1")
    with pytest.raises(InvariantViolation):
        parse_case(bad)


def test_schema_line_required():
    with pytest.raises(CaseFormatError):
        parse_case(MINI.replace("schema gridcase-1", "schema nope-9"))


def test_load_case_by_path(tmp_path):
    p = tmp_path / "mini.case"
    p.write_text(MINI)
    case = load_case(p)
    assert tuple(case.bus_ids()) == (1, 2)
