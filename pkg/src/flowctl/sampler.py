"""Euler / Euler-Maruyama integrators for base and controlled flow dynamics.

All samplers accept a single state ``(d,)`` or a batch ``(B, d)``. A batch run
with seed ``s`` draws trajectory ``b``'s noise from row ``b`` of one Philox
stream keyed by ``s``, so a path's noise depends only on ``(s, b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CostError, NumericalError, ScheduleError
from .schedules import (
    DiffusionSchedule,
    InterpolantSchedule,
    drift_from_velocity,
    zero_diffusion,
)

ODE = "ode"
SDE = "sde"


@dataclass
class SamplerConfig:
    steps: int = 28
    mode: str = ODE
    diffusion: DiffusionSchedule = field(default_factory=zero_diffusion)
    t_start: float = 1e-3

    def __post_init__(self):
        if self.steps < 2:
            raise ScheduleError("need at least 2 integration steps")
        if not 0.0 < self.t_start < 1.0:
            raise ScheduleError("t_start must lie in (0, 1)")
        if self.mode not in (ODE, SDE):
            raise ScheduleError(f"unknown sampler mode {self.mode!r}")

    def grid(self) -> np.ndarray:
        """Uniform grid ``t_start = t_0 < ... < t_N = 1``."""
        return np.linspace(self.t_start, 1.0, self.steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N+1, *x0.shape)
    noises: np.ndarray  # (N, *x0.shape) standard normal draws; empty for ODE runs
    seed: Optional[int] = None
    controls: Optional[np.ndarray] = None  # (N, *x0.shape) control u_i applied at step i

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def steps(self) -> int:
        return len(self.times) - 1


def draw_initial(seed: int, n: int, dim: int) -> np.ndarray:
    """``n`` draws from N(0, I); row ``b`` is the same for any ``n``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
    return rng.standard_normal((n, dim))


def noise_tape(seed: int, steps: int, shape) -> np.ndarray:
    """Brownian increments scaled to unit variance, shape ``(steps, *shape)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    shape = tuple(shape)
    if len(shape) == 1:
        return rng.standard_normal((steps, *shape))
    draws = rng.standard_normal((shape[0], steps, *shape[1:]))
    return np.ascontiguousarray(np.moveaxis(draws, 1, 0))


def _check(x, i):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite state after step {i}")


def integrate(velocity: Callable, sched: InterpolantSchedule, cfg: SamplerConfig, x0,
              seed: Optional[int] = None, noises=None, control: Optional[Callable] = None) -> Trajectory:
    """Shared Euler(-Maruyama) loop.

    ``velocity(x, t)`` is the (possibly shifted) velocity. In SDE mode the drift
    is derived from it by :func:`drift_from_velocity`. ``control(x, t)``, if
    given, returns the control applied at each step; it is recorded, and the
    velocity callable is expected to already include its effect.
    """
    times = cfg.grid()
    x = np.array(x0, dtype=np.float64)
    n = cfg.steps
    states = np.empty((n + 1, *x.shape))
    states[0] = x
    controls = np.empty((n, *x.shape)) if control is not None else None
    if cfg.mode == SDE:
        if noises is None:
            if seed is None:
                raise ValueError("SDE sampling needs a seed or a recorded noise tape")
            noises = noise_tape(seed, n, x.shape)
        noises = np.asarray(noises, dtype=np.float64)
        if noises.shape != (n, *x.shape):
            raise ValueError(f"noise tape shape {noises.shape} != {(n, *x.shape)}")
    else:
        noises = np.empty((0, *x.shape))
    for i in range(n):
        t = times[i]
        dt = times[i + 1] - t
        if controls is not None:
            controls[i] = control(x, t)
        v = velocity(x, t)
        if cfg.mode == SDE:
            sigma = cfg.diffusion.sigma(t)
            b = drift_from_velocity(sched, cfg.diffusion, v, x, t)
            x = x + b * dt
            if sigma != 0.0:
                x = x + sigma * np.sqrt(dt) * noises[i]
        else:
            x = x + v * dt
        _check(x, i)
        states[i + 1] = x
    return Trajectory(times, states, noises, seed, controls)


def sample_ode(field, sched: InterpolantSchedule, cfg: SamplerConfig, x0) -> Trajectory:
    if cfg.mode != ODE:
        raise ValueError("sample_ode needs an ODE sampler config")
    return integrate(field, sched, cfg, x0)


def sample_sde(field, sched: InterpolantSchedule, cfg: SamplerConfig, x0, seed=None,
               noises=None) -> Trajectory:
    if cfg.mode != SDE:
        raise ValueError("sample_sde needs an SDE sampler config")
    return integrate(field, sched, cfg, x0, seed=seed, noises=noises)


def replay(field, sched: InterpolantSchedule, cfg: SamplerConfig, traj: Trajectory) -> Trajectory:
    """Re-run the base sampler on ``traj``'s start state and recorded noise."""
    if cfg.mode == SDE:
        return sample_sde(field, sched, cfg, traj.initial, seed=traj.seed, noises=traj.noises)
    return sample_ode(field, sched, cfg, traj.initial)


def _check_cost(cost, x):
    dim = getattr(cost, "dim", None)
    if dim is not None and np.shape(x)[-1] != dim:
        raise CostError(f"cost head expects states of dim {dim}, got {np.shape(x)[-1]}")


def sample_controlled_ode(field, sched: InterpolantSchedule, cfg: SamplerConfig, cost, lam: float,
                          x0) -> Trajectory:
    """ODE steering with ``v - (1 - t) * lam * grad f(x, t)``, one gradient per step.

    ``cost.grad(x, t)`` must include any time weighting of the running cost.
    """
    from .control import instantaneous_control

    if cfg.mode != ODE:
        raise ValueError("sample_controlled_ode needs an ODE sampler config")
    _check_cost(cost, x0)
    if lam == 0.0:
        return sample_ode(field, sched, cfg, x0)

    def velocity(x, t):
        return field(x, t) + instantaneous_control(1.0, t, lam * cost.grad(x, t))

    return integrate(velocity, sched, cfg, x0)


def sample_controlled_sde(field, sched: InterpolantSchedule, cfg: SamplerConfig, cost, lam: float,
                          x0, seed=None, noises=None) -> Trajectory:
    """SDE steering with velocity ``v + (sigma/2) u``, ``u = -sigma (1 - t) lam grad f``."""
    from .control import instantaneous_control

    if cfg.mode != SDE:
        raise ValueError("sample_controlled_sde needs an SDE sampler config")
    _check_cost(cost, x0)
    if lam == 0.0:
        return sample_sde(field, sched, cfg, x0, seed=seed, noises=noises)

    def velocity(x, t):
        sigma = cfg.diffusion.sigma(t)
        u = instantaneous_control(sigma, t, lam * cost.grad(x, t))
        return field(x, t) + 0.5 * sigma * u

    return integrate(velocity, sched, cfg, x0, seed=seed, noises=noises)


def memoryless_config(sched: InterpolantSchedule, steps: int = 28, t_start: float = 1e-3) -> SamplerConfig:
    from .schedules import memoryless

    return SamplerConfig(steps=steps, mode=SDE, diffusion=memoryless(sched), t_start=t_start)
