"""Toy endpoint distributions and closed-form vector fields used as oracles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad

from .schedules import InterpolantSchedule, velocity_from_epsilon


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture; a single component with ``std=0`` is a point mass."""

    means: np.ndarray
    std: float = 0.5
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        self.weights = w / w.sum()

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, self.dim))

    def pairs(self, rng: np.random.Generator, n: int):
        """Independent coupling: ``x0 ~ N(0, I)`` and ``x1`` from the mixture."""
        x0 = rng.standard_normal((n, self.dim))
        return x0, self.sample(rng, n)


def point_mass(mu) -> GaussianMixture:
    return GaussianMixture(np.asarray(mu, dtype=np.float64)[None], std=0.0)


def gaussian(mu, std) -> GaussianMixture:
    return GaussianMixture(np.asarray(mu, dtype=np.float64)[None], std=std)


def target_from_spec(spec: dict) -> GaussianMixture:
    kind = spec.get("kind", "mixture")
    if kind == "point":
        return point_mass(spec["mean"])
    if kind == "gaussian":
        return gaussian(spec["mean"], spec["std"])
    return GaussianMixture(np.asarray(spec["means"]), std=spec.get("std", 0.5),
                           weights=spec.get("weights"))


def gaussian_velocity(sched: InterpolantSchedule, x, t, mu, std):
    """Exact marginal velocity of the path from N(0, I) to N(mu, std^2 I)."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    alpha, beta, alpha_dot, beta_dot = (float(c) for c in sched.coeffs(t))
    var = alpha**2 * std**2 + beta**2
    return alpha_dot * mu + (alpha_dot * alpha * std**2 + beta_dot * beta) / var * (x - alpha * mu)


def gaussian_epsilon(sched: InterpolantSchedule, x, t, mu, std):
    """Exact noise prediction ``E[eps | x]`` for the VP chain, at diffusion time ``1 - t``.

    Here ``sqrt(alpha_bar(1-t))`` and ``sqrt(1 - alpha_bar(1-t))`` are the FM
    ``alpha_t`` and ``beta_t`` of the time-changed schedule.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha, beta = float(sched.alpha(t)), float(sched.beta(t))
    var = alpha**2 * std**2 + beta**2
    return beta * (x - alpha * np.asarray(mu, dtype=np.float64)) / var


def gaussian_cfm_floor(sched: InterpolantSchedule, std: float, dim: int) -> float:
    """Smallest achievable CFM loss for the target N(mu, std^2 I) with independent N(0, I) noise.

    Per coordinate and time this is the conditional variance of the pathwise
    velocity given the interpolant, integrated over t ~ U[0, 1].
    """
    s2 = std**2

    def residual(t):
        alpha, beta, alpha_dot, beta_dot = (float(c) for c in sched.coeffs(t))
        var_x = alpha**2 * s2 + beta**2
        cov = alpha_dot * alpha * s2 + beta_dot * beta
        return alpha_dot**2 * s2 + beta_dot**2 - (cov**2 / var_x if var_x > 0 else 0.0)

    value, _ = quad(residual, 0.0, 1.0, limit=200)
    return dim * value


class AnalyticField:
    """Base for closed-form fields that expose the same surface as :class:`~flowctl.field.MLP`."""

    dim: int

    def vjp_state(self, x, t, a):
        raise NotImplementedError


@dataclass
class ConstantField(AnalyticField):
    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.dim = self.c.shape[-1]

    def __call__(self, x, t):
        return np.broadcast_to(self.c, np.shape(x)).copy()

    def vjp_state(self, x, t, a):
        return np.zeros(np.shape(a))


@dataclass
class LinearField(AnalyticField):
    """``v(x, t) = A x``."""

    A: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.dim = self.A.shape[0]

    def __call__(self, x, t):
        return np.asarray(x) @ self.A.T

    def vjp_state(self, x, t, a):
        return np.asarray(a) @ self.A


@dataclass
class GaussianPathField(AnalyticField):
    """Closed-form FM velocity toward ``N(mu, std^2 I)``; its Jacobian is a scaled identity."""

    sched: InterpolantSchedule
    mu: np.ndarray
    std: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.dim = self.mu.shape[0]

    def _slope(self, t):
        alpha, beta, alpha_dot, beta_dot = (float(c) for c in self.sched.coeffs(t))
        return (alpha_dot * alpha * self.std**2 + beta_dot * beta) / (alpha**2 * self.std**2 + beta**2)

    def __call__(self, x, t):
        return gaussian_velocity(self.sched, x, t, self.mu, self.std)

    def vjp_state(self, x, t, a):
        return self._slope(t) * np.asarray(a, dtype=np.float64)


@dataclass
class EpsilonField(AnalyticField):
    """FM velocity induced by the exact Gaussian noise predictor of a VP chain."""

    sched: InterpolantSchedule
    mu: np.ndarray
    std: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.dim = self.mu.shape[0]

    def __call__(self, x, t):
        eps = gaussian_epsilon(self.sched, x, t, self.mu, self.std)
        return velocity_from_epsilon(self.sched, eps, x, t)
