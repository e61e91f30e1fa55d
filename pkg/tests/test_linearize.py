import numpy as np
import pytest

from gridward.linearize import (
    find_equilibrium,
    parse_statespace,
    serialize_statespace,
)


def test_dimensions(case, ssm):
    # 9 states per machine minus the reference-angle projection
    assert ssm.order == 9 * len(case.machines) - 1
    assert ssm.b.shape == (ssm.order, 2 * len(case.ev_buses))
    assert ssm.b_d.shape == (ssm.order, 2 * len(case.attack_buses))
    assert ssm.c.shape == (len(case.machines), ssm.order)
    assert not ssm.d.any() and not ssm.d_d.any()


def test_labels(case, ssm):
    assert f"dP@{case.ev_buses[0]}" in ssm.input_labels
    assert f"dP@{case.attack_buses[0]}" in ssm.disturbance_labels
    assert all(lbl.startswith("f@") for lbl in ssm.output_labels)


def test_a_is_hurwitz(ssm):
    ev = ssm.eigenvalues()
    assert ev.real.max() < 0


def test_has_electromechanical_modes(ssm):
    ev = ssm.eigenvalues()
    freqs = np.abs(ev.imag) / (2 * np.pi)
    osc = freqs[(freqs > 0.1) & (freqs < 5.0)]
    assert osc.size >= 2 * (len(ssm.output_labels) - 1) * 0.5  # plenty of swing modes


def test_equilibrium_residual(plant):
    model, eq = plant
    zero = np.zeros(model.n_bus, dtype=complex)
    assert np.max(np.abs(model.rhs(eq.x, zero))) < 1e-10


def test_dc_gain_sign(case, ssm):
    """Added load (positive dP) must pull steady frequency down."""
    g0 = ssm.transfer(1e-6, disturbance=True)
    col = ssm.disturbance_labels.index(f"dP@{case.attack_buses[0]}")
    assert np.all(g0[:, col].real < 0)


def test_statespace_roundtrip(ssm):
    text = serialize_statespace(ssm)
    back = parse_statespace(text)
    for name in ("a", "b", "b_d", "c", "d", "d_d"):
        assert np.array_equal(getattr(ssm, name), getattr(back, name)), name
    assert back.state_labels == ssm.state_labels
    assert back.disturbance_labels == ssm.disturbance_labels


def test_linearize_rejects_bad_eps(case, plant):
    from gridward.linearize import linearize_model

    model, eq = plant
    with pytest.raises(ValueError):
        linearize_model(case, model, eq, dp_eps=0.0)
