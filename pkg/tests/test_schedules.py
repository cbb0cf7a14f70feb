import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowctl.errors import DomainError, ScheduleError
from flowctl.schedules import (
    DiffusionSchedule,
    VpRateTable,
    constant_diffusion,
    drift_correction_scale,
    drift_from_velocity,
    memoryless,
    rectified_flow,
    score_velocity_coeffs,
    sigma_mem,
    velocity_from_epsilon,
    vp_to_fm_schedule,
    zero_diffusion,
)

VP = vp_to_fm_schedule(VpRateTable.linear(1000))
times = st.floats(min_value=1e-3, max_value=0.999)


def test_rectified_flow_coefficients():
    rf = rectified_flow()
    a, b, ad, bd = rf.coeffs(0.3)
    assert (a, b, ad, bd) == (0.3, 0.7, 1.0, -1.0)
    assert score_velocity_coeffs(rf, 0.5) == (2.0, 1.0)


@pytest.mark.parametrize("t,expected", [(0.5, np.sqrt(2.0)), (0.2, np.sqrt(8.0)), (1.0, 0.0)])
def test_sigma_mem_rectified_flow(t, expected):
    assert sigma_mem(rectified_flow(), t) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
def test_sigma_mem_rejects_closed_end(t):
    with pytest.raises(DomainError):
        sigma_mem(rectified_flow(), t)


def test_vp_table_cumulative_product():
    table = VpRateTable(np.array([0.1, 0.2, 0.5]))
    assert table.alpha_bar[0] == 1.0
    np.testing.assert_allclose(table.alpha_bar, [1.0, 0.9, 0.72, 0.36], rtol=1e-14)
    np.testing.assert_allclose(table.alpha_bar_at(np.arange(4) / 3), table.alpha_bar, rtol=1e-12)


def test_vp_lift_is_monotone_and_rate_positive():
    table = VpRateTable.linear(50, 1e-3, 0.2)
    tau = np.linspace(0, 1, 2001)
    ab = table.alpha_bar_at(tau)
    assert np.all(np.diff(ab) <= 0)
    assert np.all(table.rate(tau) > 0)


@pytest.mark.parametrize("betas", [[], [0.0, 0.1], [0.5, 1.0], [[0.1, 0.2]]])
def test_vp_table_rejects_invalid_rates(betas):
    with pytest.raises(ScheduleError):
        VpRateTable(np.array(betas))


def test_degenerate_vp_table():
    with pytest.raises(ScheduleError):
        vp_to_fm_schedule(VpRateTable(np.array([0.5])))


def test_vp_chain_must_reach_noise():
    with pytest.raises(ScheduleError):
        vp_to_fm_schedule(VpRateTable.linear(10, 1e-4, 2e-3))


def test_vp_schedule_endpoints():
    assert float(VP.alpha(1.0)) == pytest.approx(1.0, abs=1e-12)
    assert float(VP.beta(1.0)) == pytest.approx(0.0, abs=1e-12)
    assert float(VP.alpha(0.0)) == pytest.approx(np.sqrt(VP.table.alpha_bar[-1]), rel=1e-12)
    # reverse VP SDE: the memoryless coefficient at the data end is sqrt(rate(0))
    assert sigma_mem(VP, 1.0) == pytest.approx(np.sqrt(VP.table.rate(0.0)), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(times)
def test_vp_schedule_invariants(t):
    a, b, ad, bd = (float(c) for c in VP.coeffs(t))
    assert a**2 + b**2 == pytest.approx(1.0, abs=1e-12)
    assert ad > 0 and bd < 0
    assert float(VP.eta(t)) > 0
    # eta in its defining form
    assert float(VP.eta(t)) == pytest.approx(b * (ad / a * b - bd), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=0.01, max_value=0.99))
def test_vp_derivatives_match_finite_differences(t):
    h = 1e-6
    a, b, ad, bd = (float(c) for c in VP.coeffs(t))
    assert ad == pytest.approx((float(VP.alpha(t + h)) - float(VP.alpha(t - h))) / (2 * h), rel=1e-4)
    assert bd == pytest.approx((float(VP.beta(t + h)) - float(VP.beta(t - h))) / (2 * h), rel=1e-4)


@settings(max_examples=100, deadline=None)
@given(times)
def test_memoryless_drift_is_two_v_minus_kappa_x(t):
    rng = np.random.default_rng(0)
    v, x = rng.standard_normal(3), rng.standard_normal(3)
    for sched in (rectified_flow(), VP):
        kappa, _ = score_velocity_coeffs(sched, t)
        b = drift_from_velocity(sched, memoryless(sched), v, x, t)
        np.testing.assert_allclose(b, 2 * v - kappa * x, rtol=1e-12, atol=1e-12)


def test_zero_diffusion_drift_is_velocity():
    v = np.array([1.0, 2.0])
    np.testing.assert_array_equal(drift_from_velocity(rectified_flow(), zero_diffusion(), v, np.zeros(2), 0.5), v)


def test_custom_diffusion_scale():
    rf = rectified_flow()
    assert drift_correction_scale(rf, constant_diffusion(1.0), 0.5) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        drift_correction_scale(rf, constant_diffusion(1.0), 1.0)


@pytest.mark.parametrize("kw", [
    dict(kind="memoryless"),
    dict(kind="custom", times=[0.0, 1.0], values=[1.0]),
    dict(kind="custom", times=[0.0, 1.0], values=[1.0, -1.0]),
    dict(kind="custom", times=[1.0, 0.0], values=[1.0, 1.0]),
])
def test_diffusion_schedule_validation(kw):
    with pytest.raises(ScheduleError):
        DiffusionSchedule(**kw)


@settings(max_examples=100, deadline=None)
@given(times)
def test_epsilon_map_inverts_noise_parameterization(t):
    """For a single data point x1, the exact noise and velocity are known; the map must agree."""
    rng = np.random.default_rng(1)
    x0, x1 = rng.standard_normal(2), rng.standard_normal(2)
    for sched in (rectified_flow(), VP):
        a, b, ad, bd = (float(c) for c in sched.coeffs(t))
        xt = a * x1 + b * x0
        np.testing.assert_allclose(velocity_from_epsilon(sched, x0, xt, t), ad * x1 + bd * x0,
                                   rtol=1e-7, atol=1e-9)


def test_epsilon_map_singular_at_data_end():
    with pytest.raises(DomainError):
        velocity_from_epsilon(rectified_flow(), np.zeros(2), np.zeros(2), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=1e-4, max_value=0.9), min_size=2, max_size=60))
def test_vp_lift_properties_on_random_tables(betas):
    table = VpRateTable(np.array(betas))
    tau = np.linspace(0, 1, 4001)
    assert np.all(table.rate(tau) > 0)
    nodes = np.arange(table.K + 1) / table.K
    np.testing.assert_allclose(table.alpha_bar_at(nodes), table.alpha_bar, rtol=1e-12)
    assert np.all(np.diff(table.alpha_bar_at(tau)) <= 0)
