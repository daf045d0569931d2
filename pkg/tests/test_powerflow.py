import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adnsim.network import GridError, assemble_ybus, grid_from_dict, load_powers
from adnsim.powerflow import (PowerFlowError, branch_flow, mismatch_jacobian, power_mismatch, solve_power_flow,
                              transformer_mv_flow)

from conftest import rng, two_bus_doc


@pytest.fixture(scope="module")
def base(grid):
    return solve_power_flow(grid, "pq")


def test_base_case_transformer_flow(base):
    p, q = transformer_mv_flow(base)
    assert p == pytest.approx(24.373, rel=5e-3)
    assert q == pytest.approx(6.115, rel=5e-3)


def test_converges_fast_from_flat_start(base):
    assert base.iterations <= 10
    assert base.residual_norm < 1e-8
    assert base.voltage(base.grid.slack_bus) == base.grid.slack_voltage


def test_converged_mismatch_small(base):
    assert np.max(np.abs(power_mismatch(base.grid, base.voltages, "pq"))) < 1e-8


def test_warm_start(base):
    again = solve_power_flow(base.grid, "pq", v0=base.voltages)
    assert again.iterations <= 2
    np.testing.assert_allclose(again.voltages, base.voltages, atol=1e-10)


def _stacked(grid, v, ybus):
    pq = [i for i in range(grid.n_bus) if i != grid.slack_index]
    mis = power_mismatch(grid, v, "pq", ybus=ybus)
    return np.r_[mis[pq].real, mis[pq].imag]


@pytest.mark.parametrize("seed", range(4))
def test_jacobian_matches_finite_differences(grid, seed):
    r = rng(seed)
    ybus = assemble_ybus(grid, "pq")
    pq = [i for i in range(grid.n_bus) if i != grid.slack_index]
    va = np.zeros(grid.n_bus)
    vm = np.ones(grid.n_bus)
    va[pq] = r.uniform(-0.1, 0.1, len(pq))
    vm[pq] = r.uniform(0.9, 1.1, len(pq))
    x = np.r_[va[pq], vm[pq]]

    def f(x):
        a, m = va.copy(), vm.copy()
        a[pq], m[pq] = x[:len(pq)], x[len(pq):]
        v = m * np.exp(1j * a)
        v[grid.slack_index] = grid.slack_voltage
        return _stacked(grid, v, ybus)

    h = 1e-6
    fd = np.column_stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
    v = vm * np.exp(1j * va)
    v[grid.slack_index] = grid.slack_voltage
    jac = mismatch_jacobian(grid, v, ybus)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-5


def test_mismatch_linear_in_perturbation(base):
    grid = base.grid
    r = rng(3)
    d = r.normal(size=grid.n_bus) + 1j * r.normal(size=grid.n_bus)
    d[grid.slack_index] = 0
    d /= np.max(np.abs(d))
    norms = [np.max(np.abs(power_mismatch(grid, base.voltages + eps * d))) for eps in (1e-4, 1e-5)]
    assert norms[0] / norms[1] == pytest.approx(10.0, rel=0.02)


def test_flat_start_mismatch_equals_loads(grid):
    doc_grid = grid.with_tap(grid.transformer.tap_neutral)
    v = np.ones(grid.n_bus, dtype=complex)
    ybus = assemble_ybus(doc_grid, "pq")
    # subtract the shunt contribution so only the load term remains
    shunt = ybus.sum(axis=1)
    mis = power_mismatch(doc_grid, v, "pq", ybus=ybus) + np.conj(shunt)
    expected = -load_powers(doc_grid)
    expected[doc_grid.slack_index] = 0
    mis[doc_grid.slack_index] = 0
    np.testing.assert_allclose(mis, expected, atol=1e-12)


def test_two_bus_matches_quadratic(two_bus):
    x, p, q = 0.1, 0.5, 0.1
    g = two_bus(x_pu=x, load=(p, q))
    sol = solve_power_flow(g, "pq")
    # V2 = V1 - j x I, I = conj(S/V2): |V2|^4 + (2 q x - 1)|V2|^2 + x^2 (p^2 + q^2) = 0
    disc = (2 * q * x - 1) ** 2 - 4 * x * x * (p * p + q * q)
    vm2 = np.sqrt(((1 - 2 * q * x) + np.sqrt(disc)) / 2)
    delta = -np.arcsin(p * x / vm2)
    assert abs(sol.voltage("B")) == pytest.approx(vm2, abs=1e-9)
    assert np.angle(sol.voltage("B")) == pytest.approx(delta, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(p=st.floats(0.0, 1.5), q=st.floats(-0.5, 0.5), r=st.floats(0.0, 0.1))
def test_losses_equal_total_injection(p, q, r):
    doc = two_bus_doc(x_pu=0.1, r_pu=r, load=(p, q))
    try:
        sol = solve_power_flow(grid_from_dict(doc), "pq")
    except PowerFlowError:
        return  # past the nose of the PV curve
    flow = branch_flow(sol, "AB")
    total = sol.injections().real.sum() * sol.grid.s_base
    assert total == pytest.approx(flow.p_loss, abs=1e-6 * sol.grid.s_base)
    assert flow.p_loss >= -1e-9


def test_losses_on_bundled_grid(base):
    grid = base.grid
    losses = sum(branch_flow(base, el).p_loss for el in grid.elements if getattr(el, "in_service", True))
    # branch shunts are purely capacitive, so all real power lost is series loss
    assert base.injections().real.sum() * grid.s_base == pytest.approx(losses, abs=1e-6 * grid.s_base)


def test_passive_branch_loss_non_negative(base):
    for br in base.grid.branches:
        if br.in_service:
            assert branch_flow(base, br).p_loss >= -1e-12


def test_open_branch_carries_nothing(base):
    for br in base.grid.branches:
        if not br.in_service:
            f = branch_flow(base, br)
            assert (f.p_from, f.q_from, f.p_to, f.q_to) == (0.0, 0.0, 0.0, 0.0)


def test_unknown_branch(base):
    with pytest.raises(GridError):
        branch_flow(base, "L99")


def test_no_load_grid(doc_copy):
    for ld in doc_copy["loads"]:
        ld["p_mw"] = ld["q_mvar"] = 0.0
    for br in doc_copy["branches"]:
        br["b_us"] = 0.0
    doc_copy["transformer"]["tap_position"] = doc_copy["transformer"].get("tap_neutral", 0)
    g = grid_from_dict(doc_copy)
    for lm in ("pq", "z"):
        sol = solve_power_flow(g, lm)
        assert sol.iterations <= 1
        np.testing.assert_allclose(sol.voltages, g.slack_voltage, atol=1e-12)
        p, q = transformer_mv_flow(sol)
        assert abs(p) < 1e-9 and abs(q) < 1e-9


def test_impedance_loads_differ_off_nominal(grid):
    a = transformer_mv_flow(solve_power_flow(grid, "pq"))
    b = transformer_mv_flow(solve_power_flow(grid, "z"))
    assert b[0] != pytest.approx(a[0], abs=1e-3)


def test_non_convergence_reports_residual(two_bus):
    with pytest.raises(PowerFlowError) as exc:
        solve_power_flow(two_bus(x_pu=0.1, load=(20.0, 5.0)), "pq", max_iter=15)
    assert exc.value.residual > 1e-8
