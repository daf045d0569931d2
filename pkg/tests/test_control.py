import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adnsim.control import (ControlParams, DGState, ReferenceSchedule, current_reference, dg_dynamics,
                            frt_flag_and_injection, global_error, integrator_rate, limit_currents)

P = ControlParams()
currents = st.floats(-5.0, 5.0)
limits = st.floats(0.05, 3.0)


def test_global_error_examples():
    refs = ReferenceSchedule(((1.0, 24.0, 5.0),), 24.373, 6.115)
    assert global_error(24.373, 6.115, refs, 0.5) == (0.0, 0.0)
    dp, dq = global_error(24.373, 6.115, refs, 1.0)
    assert dp == pytest.approx(-0.373) and dq == pytest.approx(-1.115)
    assert refs.at(0.999) == (24.373, 6.115)


def test_schedule_rejects_unsorted_times():
    with pytest.raises(ValueError):
        ReferenceSchedule(((1.0, 0, 0), (1.0, 1, 1)))


def test_integrator_examples():
    assert integrator_rate(0.5, 0.3, True, 1.0, 0.0, 1.0) == 0.0
    assert integrator_rate(1.0, 0.01, False, 1.0, 0.0, 1.0) == 0.0
    assert integrator_rate(0.0, -0.01, False, 1.0, 0.0, 1.0) == 0.0
    assert integrator_rate(0.5, 0.01, False, 1.0, 0.0, 1.0, s_base=100.0) == pytest.approx(1.0)
    # leaving the bound is allowed
    assert integrator_rate(1.0, -0.01, False, 1.0, 0.0, 1.0) == pytest.approx(-1.0)


@pytest.mark.parametrize("u, e, iq", [(1.0, 0, 0.0), (0.8, 1, 0.2), (1.15, 1, -0.1), (0.95, 0, 0.0)])
def test_frt_examples(u, e, iq):
    got = frt_flag_and_injection(u, P)
    assert got[0] == e
    assert got[1] == pytest.approx(iq, abs=1e-12)


def test_frt_continuous_and_slope():
    lo, hi = P.u_ref - P.u_dead, P.u_ref + P.u_dead
    for edge in (lo, hi):
        for side in (-1e-9, 1e-9):
            assert abs(frt_flag_and_injection(edge + side, P)[1]) < 1e-8
    u = np.linspace(0.0, 0.85, 50)
    _, iq = frt_flag_and_injection(u, P)
    np.testing.assert_allclose(np.diff(iq) / np.diff(u), -P.k_frt, rtol=1e-9)
    u = np.linspace(1.15, 1.4, 50)
    _, iq = frt_flag_and_injection(u, P)
    np.testing.assert_allclose(np.diff(iq) / np.diff(u), -P.k_frt, rtol=1e-9)


@settings(max_examples=300, deadline=None)
@given(u=st.floats(0.0, 2.0))
def test_frt_sign(u):
    e, iq = frt_flag_and_injection(u, P)
    dev = u - P.u_ref  # classify on the deviation itself so band edges round the same way
    if dev < -P.u_dead:
        assert e == 1 and iq > 0
    elif dev > P.u_dead:
        assert e == 1 and iq < 0
    else:
        assert e == 0 and iq == 0.0


@pytest.mark.parametrize("args, expected", [
    ((0.5, 0.2, 0, 1.0), (0.5, 0.2)),
    ((0.8, 0.9, 1, 1.0), (math.sqrt(1 - 0.81), 0.9)),
    ((2.0, 0.0, 0, 1.0), (1.0, 0.0)),
])
def test_limiter_examples(args, expected):
    assert limit_currents(*args) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=500, deadline=None)
@given(i_d=currents, i_q=currents, e=st.booleans(), i_max=limits)
def test_limiter_circle_and_idempotence(i_d, i_q, e, i_max):
    d, q = limit_currents(i_d, i_q, e, i_max)
    assert d * d + q * q <= i_max * i_max + 1e-12
    assert np.sign(d) in (0.0, np.sign(i_d)) and np.sign(q) in (0.0, np.sign(i_q))
    assert limit_currents(d, q, e, i_max) == (d, q)
    prio, raw = (q, i_q) if e else (d, i_d)
    assert prio == pytest.approx(np.clip(raw, -i_max, i_max))


def test_current_reference_examples():
    assert current_reference(1.0, 0.0, 1.0 + 0j) == pytest.approx((0.01, 0.0))
    assert current_reference(0.0, 0.0, 1.0 + 0j) == (0.0, 0.0)
    assert current_reference(1.0, 1.0, 0.05 + 0j) == pytest.approx((0.1, -0.1))


@settings(max_examples=200, deadline=None)
@given(p=st.floats(0, 1), q=st.floats(-1, 1), um=st.floats(0.2, 1.2), ang=st.floats(-1, 1))
def test_current_reference_delivers_requested_power(p, q, um, ang):
    u = um * np.exp(1j * ang)
    i_d, i_q = current_reference(p, q, u * np.exp(-1j * ang))
    s = u * np.conj((i_d + 1j * i_q) * np.exp(1j * ang)) * 100.0
    assert s.real == pytest.approx(p, abs=1e-12)
    assert s.imag == pytest.approx(q, abs=1e-12)


def _steady(p=0.4, q=0.2, u=1.0 + 0j):
    theta = np.angle(u)
    i_d, i_q = current_reference(p, q, abs(u) + 0j)
    return DGState(p, q, theta, i_d, i_q)


def test_dg_equilibrium():
    x = _steady()
    d, current = dg_dynamics(x, 1.0 + 0j, 0.0, 0.0, False, P)
    assert max(abs(v) for v in (d.chi_p, d.chi_q, d.theta_pll, d.i_d, d.i_q)) < 1e-12
    s = 1.0 * np.conj(current) * 100.0
    assert s == pytest.approx(0.4 + 0.2j)


def test_pll_angle_step():
    x = _steady()
    d, _ = dg_dynamics(x, np.exp(0.1j), 0.0, 0.0, False, P)
    assert d.theta_pll == pytest.approx(0.1 / P.t_pll)


def test_fault_at_pcc_respects_limit():
    x = _steady(p=1.0, q=0.0)
    d, _ = dg_dynamics(x, 0.5 + 0j, 0.0, 0.0, True, P)
    scale = 100.0 / P.s_rated
    i_d_cmd = (x.i_d + P.t_conv * d.i_d) * scale
    i_q_cmd = (x.i_q + P.t_conv * d.i_q) * scale
    assert i_d_cmd**2 + i_q_cmd**2 <= P.i_max**2 + 1e-12
    # reactive current goes to the under-voltage support direction (Q = -u_d i_q > 0)
    assert i_q_cmd == pytest.approx(-P.k_frt * (P.u_ref - P.u_dead - 0.5))
    # active current gets what is left of the circle
    assert i_d_cmd == pytest.approx(math.sqrt(P.i_max**2 - i_q_cmd**2))
    assert d.chi_p == 0.0 and d.chi_q == 0.0


def test_integrators_follow_global_error():
    x = _steady()
    # importing more than requested: DGs should raise their output
    d, _ = dg_dynamics(x, 1.0 + 0j, -0.5, -0.5, False, P)
    assert d.chi_p > 0 and d.chi_q > 0


def test_control_params_validation():
    with pytest.raises(ValueError):
        ControlParams(p_min=2.0, p_max=1.0)
    with pytest.raises(ValueError):
        ControlParams(u_dead=0.0)
    with pytest.raises(ValueError):
        ControlParams.from_dict({"k_x": 1})
    assert ControlParams.from_dict({"k_frt": 3}).k_frt == 3.0
