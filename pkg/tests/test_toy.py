import numpy as np
import pytest
from scipy.integrate import trapezoid

from flowctl.schedules import VpRateTable, rectified_flow, vp_to_fm_schedule
from flowctl.toy import (
    EpsilonField,
    GaussianMixture,
    GaussianPathField,
    gaussian,
    gaussian_cfm_floor,
    gaussian_epsilon,
    point_mass,
    target_from_spec,
)

RF = rectified_flow()
VP = vp_to_fm_schedule(VpRateTable.linear(1000))


def test_mixture_weights_normalized_and_sampling_shape():
    g = GaussianMixture(np.array([[0.0, 0.0], [1.0, 1.0]]), std=0.05, weights=np.array([1.0, 3.0]))
    np.testing.assert_allclose(g.weights, [0.25, 0.75])
    x = g.sample(np.random.default_rng(0), 4000)
    assert x.shape == (4000, 2)
    assert np.mean(x[:, 0] > 0.5) == pytest.approx(0.75, abs=0.03)


def test_point_mass_is_exact():
    x = point_mass([2.0, -1.0]).sample(np.random.default_rng(0), 10)
    assert np.all(x == [2.0, -1.0])


def test_target_from_spec():
    assert target_from_spec({"kind": "gaussian", "mean": [1.0], "std": 2.0}).std == 2.0
    assert target_from_spec({"kind": "point", "mean": [0.0, 1.0]}).std == 0.0
    assert target_from_spec({"means": [[0.0], [1.0]]}).means.shape == (2, 1)


@pytest.mark.parametrize("sched", [RF, VP], ids=["rf", "vp"])
@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_gaussian_velocity_is_conditional_expectation(sched, t):
    """Monte-Carlo regression of the pathwise velocity onto x_t recovers the closed form."""
    rng = np.random.default_rng(0)
    mu, std, n = np.array([1.0, -0.5]), 0.7, 400_000
    x0 = rng.standard_normal((n, 2))
    x1 = mu + std * rng.standard_normal((n, 2))
    a, b, ad, bd = (float(c) for c in sched.coeffs(t))
    xt, target = a * x1 + b * x0, ad * x1 + bd * x0
    # the exact velocity is affine in x: fit it per coordinate by least squares
    for j in range(2):
        A = np.stack([np.ones(n), xt[:, j]], axis=1)
        coef, *_ = np.linalg.lstsq(A, target[:, j], rcond=None)
        probe_x = np.array([[0.3, 0.3]])
        exact = GaussianPathField(sched, mu, std)(probe_x, t)[0, j]
        assert coef[0] + coef[1] * 0.3 == pytest.approx(exact, abs=0.02)


def test_gaussian_epsilon_is_posterior_mean_of_noise():
    rng = np.random.default_rng(1)
    mu, std, t, n = np.array([0.5, 1.0]), 0.4, 0.6, 400_000
    x0 = rng.standard_normal((n, 2))
    a, b = float(VP.alpha(t)), float(VP.beta(t))
    xt = a * (mu + std * rng.standard_normal((n, 2))) + b * x0
    coef = np.polyfit(xt[:, 0], x0[:, 0], 1)
    assert np.polyval(coef, 0.2) == pytest.approx(gaussian_epsilon(VP, np.array([0.2, 0.0]), t, mu, std)[0],
                                                  abs=0.01)


def test_epsilon_and_velocity_fields_agree():
    x = np.random.default_rng(2).standard_normal((5, 2))
    for t in (0.05, 0.5, 0.95):
        np.testing.assert_allclose(EpsilonField(VP, np.ones(2), 0.3)(x, t),
                                   GaussianPathField(VP, np.ones(2), 0.3)(x, t), rtol=1e-9, atol=1e-12)


def test_cfm_floor_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mu, std, n = np.zeros(2), 0.5, 400_000
    x0, x1 = rng.standard_normal((n, 2)), mu + std * rng.standard_normal((n, 2))
    t = rng.uniform(size=n)
    xt = t[:, None] * x1 + (1 - t[:, None]) * x0
    field = GaussianPathField(RF, mu, std)
    v = np.stack([field(xt[i:i + 1], t[i])[0] for i in range(0, 2000)])
    mc = np.mean(np.sum((v - (x1 - x0)[:2000]) ** 2, axis=1))
    assert mc == pytest.approx(gaussian_cfm_floor(RF, std, 2), rel=0.1)


def test_cfm_floor_for_standard_normal_target_under_rf():
    # s = 1: residual 2 - (2t - 1)^2 / (t^2 + (1 - t)^2), integrated numerically
    t = np.linspace(0, 1, 200_001)
    r = 2 - (2 * t - 1) ** 2 / (t**2 + (1 - t) ** 2)
    assert gaussian_cfm_floor(RF, 1.0, 1) == pytest.approx(trapezoid(r, t), rel=1e-8)
