"""Interpolant schedules, diffusion coefficients and drift/score/velocity maps.

Time runs from noise (t=0) to data (t=1). A schedule is the pair
``alpha(t), beta(t)`` with the reference path ``X_t = beta_t X_0 + alpha_t X_1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import DomainError, ScheduleError

RECTIFIED_FLOW = "rectified_flow"
VP_INDUCED = "vp_induced"

# a VP chain whose terminal alpha_bar exceeds this is not treated as reaching noise
MAX_TERMINAL_ALPHA_BAR = 1e-2


@dataclass(frozen=True, eq=False)
class VpRateTable:
    """K-step variance-preserving noising chain.

    ``betas[k-1]`` is the per-step rate of step k. ``alpha_bar`` has K+1
    entries with ``alpha_bar[0] = 1`` and ``alpha_bar[k] = prod_{i<=k}(1 - beta_i)``.
    The continuous cumulative product between grid points ``tau_k = k/K`` is a
    monotone cubic Hermite interpolant of ``log alpha_bar``: interior slopes are
    harmonic means of the adjacent step rates, end slopes are the end step
    rates. It hits the discrete chain exactly at the nodes and its rate is
    continuous and strictly positive.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray = field(init=False, repr=False)
    _log_ab: CubicHermiteSpline = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a nonempty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("every per-step rate must lie in (0, 1)")
        betas.setflags(write=False)
        log_ab = np.concatenate([[0.0], np.cumsum(np.log1p(-betas))])
        alpha_bar = np.exp(log_ab)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if betas.size >= 2:
            tau = np.arange(betas.size + 1) / betas.size
            secant = np.log1p(-betas) * betas.size
            slopes = np.empty(betas.size + 1)
            slopes[0], slopes[-1] = secant[0], secant[-1]
            slopes[1:-1] = 2.0 * secant[:-1] * secant[1:] / (secant[:-1] + secant[1:])
            object.__setattr__(self, "_log_ab", CubicHermiteSpline(tau, log_ab, slopes))

    @classmethod
    def linear(cls, K: int, beta_min: float = 1e-4, beta_max: float = 2e-2) -> "VpRateTable":
        return cls(np.linspace(beta_min, beta_max, int(K)))

    @property
    def K(self) -> int:
        return int(self.betas.size)

    def step_rate(self, tau):
        """Piecewise-constant continuous rate ``beta_k / dtau`` on ``[tau_{k-1}, tau_k)``."""
        tau = np.asarray(tau, dtype=np.float64)
        k = np.clip(np.floor(tau * self.K).astype(int), 0, self.K - 1)
        return self.betas[k] * self.K

    def _require_smooth(self):
        if self.K < 2:
            raise ScheduleError("a VP chain needs K >= 2 steps for a continuous-time lift")

    def alpha_bar_at(self, tau):
        self._require_smooth()
        return np.exp(self._log_ab(np.clip(tau, 0.0, 1.0)))

    def rate(self, tau):
        """Instantaneous rate ``-d/dtau log alpha_bar(tau)`` of the smooth lift."""
        self._require_smooth()
        return -self._log_ab(np.clip(tau, 0.0, 1.0), 1)


@dataclass(frozen=True, eq=False)
class InterpolantSchedule:
    """Scheduler pair ``(alpha_t, beta_t)`` with time derivatives.

    Build one with :func:`rectified_flow` or :func:`vp_to_fm_schedule`.
    """

    kind: str = RECTIFIED_FLOW
    table: Optional[VpRateTable] = None

    def coeffs(self, t):
        """Return ``(alpha, beta, alpha_dot, beta_dot)`` at ``t``."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == RECTIFIED_FLOW:
            one = np.ones_like(t)
            return t, 1.0 - t, one, -one
        tau = 1.0 - t
        ab = self.table.alpha_bar_at(tau)
        r = self.table.rate(tau)
        alpha = np.sqrt(ab)
        beta = np.sqrt(np.maximum(1.0 - ab, 0.0))
        alpha_dot = 0.5 * r * alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            beta_dot = np.where(beta > 0.0, -alpha * alpha_dot / beta, -np.inf)
        return alpha, beta, alpha_dot, beta_dot

    def alpha(self, t):
        return self.coeffs(t)[0]

    def beta(self, t):
        return self.coeffs(t)[1]

    def alpha_dot(self, t):
        return self.coeffs(t)[2]

    def beta_dot(self, t):
        return self.coeffs(t)[3]

    def eta(self, t):
        """``beta_t (alpha_dot/alpha beta_t - beta_dot)``, finite up to t=1.

        For VP-induced schedules ``beta*beta_dot = -alpha*alpha_dot`` so the
        product is taken in that form, which stays finite where beta hits 0.
        """
        t = np.asarray(t, dtype=np.float64)
        if self.kind == RECTIFIED_FLOW:
            return (1.0 - t) / t
        alpha, beta, alpha_dot, _ = self.coeffs(t)
        return alpha_dot / alpha * beta**2 + alpha * alpha_dot


def rectified_flow() -> InterpolantSchedule:
    return InterpolantSchedule(RECTIFIED_FLOW)


def vp_to_fm_schedule(table: VpRateTable) -> InterpolantSchedule:
    """Time-change a VP chain into an FM schedule running noise -> data.

    ``alpha_t = sqrt(alpha_bar(1 - t))`` and ``beta_t = sqrt(1 - alpha_bar(1 - t))``.
    """
    if table.K < 2:
        raise ScheduleError(f"degenerate VP table with K={table.K}; need K >= 2")
    if table.alpha_bar[-1] > MAX_TERMINAL_ALPHA_BAR:
        raise ScheduleError(
            f"terminal alpha_bar={table.alpha_bar[-1]:.3g} exceeds "
            f"{MAX_TERMINAL_ALPHA_BAR:g}; the chain does not reach noise"
        )
    sched = InterpolantSchedule(VP_INDUCED, table)
    if abs(float(sched.alpha(1.0)) - 1.0) > 1e-6:
        raise ScheduleError("alpha(1) deviates from 1 by more than 1e-6")
    return sched


def _check_open(t):
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t={t} outside (0, 1]")
    return t


def score_velocity_coeffs(sched: InterpolantSchedule, t: float) -> tuple[float, float]:
    """``kappa_t = alpha_dot/alpha`` and ``eta_t`` of the affine score/velocity map."""
    t = _check_open(t)
    alpha, _, alpha_dot, _ = sched.coeffs(t)
    if alpha <= 0.0:
        raise DomainError(f"alpha({t}) = 0")
    return float(alpha_dot / alpha), float(sched.eta(t))


def sigma_mem(sched: InterpolantSchedule, t: float) -> float:
    """Memoryless diffusion coefficient ``sqrt(2 eta_t)``."""
    t = _check_open(t)
    rad = 2.0 * float(sched.eta(t))
    if not rad >= 0.0:
        raise DomainError(f"negative radicand {rad} at t={t}: invalid scheduler")
    return float(np.sqrt(rad))


ZERO = "zero"
MEMORYLESS = "memoryless"
CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Scalar diffusion coefficient ``sigma(t) >= 0``.

    ``custom`` schedules are a ``(times, values)`` table interpolated linearly.
    """

    kind: str = ZERO
    sched: Optional[InterpolantSchedule] = None
    times: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == MEMORYLESS and self.sched is None:
            raise ScheduleError("memoryless diffusion needs its interpolant schedule")
        if self.kind == CUSTOM:
            times = np.asarray(self.times, dtype=np.float64)
            values = np.asarray(self.values, dtype=np.float64)
            if times.shape != values.shape or times.ndim != 1 or times.size < 1:
                raise ScheduleError("custom diffusion table needs matching 1-D times/values")
            if np.any(values < 0.0):
                raise ScheduleError("diffusion coefficient must be nonnegative")
            if np.any(np.diff(times) <= 0.0):
                raise ScheduleError("custom diffusion times must increase")
            object.__setattr__(self, "times", times)
            object.__setattr__(self, "values", values)

    def sigma(self, t: float) -> float:
        if self.kind == ZERO:
            return 0.0
        if self.kind == MEMORYLESS:
            return sigma_mem(self.sched, t)
        return float(np.interp(t, self.times, self.values))

    @property
    def is_zero(self) -> bool:
        return self.kind == ZERO or (self.kind == CUSTOM and not np.any(self.values))


def zero_diffusion() -> DiffusionSchedule:
    return DiffusionSchedule(ZERO)


def memoryless(sched: InterpolantSchedule) -> DiffusionSchedule:
    return DiffusionSchedule(MEMORYLESS, sched=sched)


def constant_diffusion(value: float) -> DiffusionSchedule:
    return DiffusionSchedule(CUSTOM, times=np.array([0.0, 1.0]), values=np.array([value, value]))


def drift_correction_scale(sched: InterpolantSchedule, diff: DiffusionSchedule, t: float) -> float:
    """The factor ``sigma^2 / (2 eta_t)`` multiplying ``v - kappa x`` in the drift."""
    if diff.kind == MEMORYLESS:
        return 1.0
    sigma = diff.sigma(t)
    if sigma == 0.0:
        return 0.0
    eta = float(sched.eta(_check_open(t)))
    if eta == 0.0 or not np.isfinite(eta):
        raise DomainError(f"drift correction denominator vanishes at t={t}")
    return sigma**2 / (2.0 * eta)


def drift_from_velocity(sched: InterpolantSchedule, diff: DiffusionSchedule, v, x, t: float):
    """SDE drift ``b = v + sigma^2/(2 eta) (v - kappa x)`` with the same marginals as the flow."""
    v = np.asarray(v, dtype=np.float64)
    c = drift_correction_scale(sched, diff, t)
    if c == 0.0:
        return v
    kappa, _ = score_velocity_coeffs(sched, t)
    return v + c * (v - kappa * np.asarray(x, dtype=np.float64))


def velocity_from_epsilon(sched: InterpolantSchedule, eps, x, t: float):
    """FM velocity induced by a noise-prediction output taken at diffusion time ``1 - t``."""
    t = _check_open(t)
    beta = float(sched.beta(t))
    if beta <= 0.0:
        raise DomainError(f"beta({t}) = 0; the epsilon map is singular at the data end")
    kappa, eta = score_velocity_coeffs(sched, t)
    return kappa * np.asarray(x, dtype=np.float64) - eta * np.asarray(eps, dtype=np.float64) / beta
