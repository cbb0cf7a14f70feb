"""Single-pass test-time control and Adjoint Matching fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import GridMismatch, IntegrityError, NumericalError, TrainingDiverged
from .field import CONTROL_TAG, MLP, AdamW, AdamWConfig, jvp_state, smooth
from .sampler import (
    SDE,
    SamplerConfig,
    Trajectory,
    draw_initial,
    integrate,
    memoryless_config,
    sample_ode,
)
from .schedules import (
    DiffusionSchedule,
    InterpolantSchedule,
    drift_correction_scale,
    score_velocity_coeffs,
    sigma_mem,
)

logger = logging.getLogger(__name__)


def instantaneous_control(sigma_t: float, t: float, grad_f):
    """``-sigma_t (1 - t) grad_f``: the adjoint replaced by a left-Riemann estimate at the current state.

    Pass ``sigma_t = 1`` for the deterministic (ODE) variant.
    """
    return -sigma_t * (1.0 - t) * np.asarray(grad_f, dtype=np.float64)


@dataclass
class AdjointState:
    times: np.ndarray
    values: np.ndarray  # (N+1, *state_shape); values[i] = a(t_i)
    terminal: np.ndarray


def drift_vjp(field, sched: InterpolantSchedule, diff: DiffusionSchedule, x, t, a):
    """``(d b / d x)^T a`` for the base drift ``b = (1 + c) v - c kappa x``, ``c = sigma^2 / (2 eta)``."""
    c = drift_correction_scale(sched, diff, t)
    va = jvp_state(field, x, t, a)
    if c == 0.0:
        return va
    kappa, _ = score_velocity_coeffs(sched, t)
    return (1.0 + c) * va - c * kappa * np.asarray(a, dtype=np.float64)


def lean_adjoint_backward(field, sched: InterpolantSchedule, diff: DiffusionSchedule, traj: Trajectory,
                          cost=None, g_grad: Optional[Callable] = None, lam: float = 1.0) -> AdjointState:
    """Integrate the lean adjoint backward along a frozen trajectory.

    ``a(t_i) = a(t_{i+1}) + dt_i [ (db/dx)(X_i, t_i)^T a(t_{i+1}) + lam grad f(X_i, t_i) ]``
    with ``a(1) = grad g(X_1)``. This is the exact reverse sweep of the Euler
    forward map, so ``a(t_i)`` is the sensitivity of the discrete objective
    to ``X_i``. ``cost=None`` means ``f = 0``; ``g_grad=None`` means ``g = 0``.
    """
    times, states = traj.times, traj.states
    if states.shape[0] != times.shape[0]:
        raise GridMismatch("trajectory states do not match its time grid")
    n = len(times) - 1
    values = np.empty_like(states)
    terminal = np.zeros_like(states[-1]) if g_grad is None else np.asarray(g_grad(states[-1]), dtype=np.float64)
    a = terminal.copy()
    values[n] = terminal
    for i in range(n - 1, -1, -1):
        t, x = times[i], states[i]
        dt = times[i + 1] - t
        step = drift_vjp(field, sched, diff, x, t, a)
        if cost is not None and lam != 0.0:
            step = step + lam * cost.grad(x, t)
        a = a + dt * step
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite adjoint at step {i}")
        values[i] = a
    return AdjointState(times, values, terminal)


def control_net(dim: int, hidden=(64, 64), seed: int = 0) -> MLP:
    """Control network whose last layer starts at zero, so fine-tuning starts at the base model."""
    return MLP.init(dim, hidden, seed=seed, tag=CONTROL_TAG, zero_last=True)


def am_targets(traj: Trajectory, adj: AdjointState, diff: DiffusionSchedule):
    """Regression targets ``-sigma(t_i) a(t_{i+1})`` for the control applied on step i."""
    if adj.values.shape != traj.states.shape or not np.array_equal(adj.times, traj.times):
        raise GridMismatch("adjoint was not computed on this trajectory's grid")
    n = len(traj.times) - 1
    sig = np.array([diff.sigma(t) for t in traj.times[:n]])
    return -sig.reshape((n,) + (1,) * (adj.values.ndim - 1)) * adj.values[1:]


def am_loss(control: MLP, traj: Trajectory, adj: AdjointState, diff: DiffusionSchedule, subsample):
    """Grid-weighted mean over the sampled steps of ``1/2 ||u(X_i, t_i) + sigma_i a(t_{i+1})||^2``.

    Targets are constants. Returns ``(loss, grad_theta)``; batched trajectories
    are averaged over their batch axis too.
    """
    idx = np.asarray(subsample, dtype=int)
    if idx.size == 0:
        raise ValueError("empty step subsample")
    n = len(traj.times) - 1
    if idx.min() < 0 or idx.max() >= n:
        raise GridMismatch(f"subsample indices must lie in [0, {n})")
    targets = am_targets(traj, adj, diff)[idx]
    X = traj.states[idx]
    dt = np.diff(traj.times)[idx]
    w = dt / dt.sum()
    batch = X.reshape(len(idx), -1, control.dim)
    nb = batch.shape[1]
    tcol = np.repeat(traj.times[idx], nb)
    u, cache = control.forward(batch.reshape(-1, control.dim), tcol, cache=True)
    resid = u - targets.reshape(-1, control.dim)
    wrow = np.repeat(w, nb) / nb
    loss = float(0.5 * np.sum(wrow[:, None] * resid**2))
    grad, _ = control.backward(cache, wrow[:, None] * resid, state=False)
    return loss, grad


@dataclass
class AMConfig:
    lam: float = 1.0
    steps_total: int = 400
    batch_trajectories: int = 5
    subsample_steps: int = 16
    sampler_steps: int = 28
    t_start: float = 1e-3
    hidden: tuple = (64, 64)
    optimizer: AdamWConfig = field(default_factory=lambda: AdamWConfig(lr=1e-3))
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.subsample_steps > self.sampler_steps:
            raise ValueError("subsample_steps must not exceed the grid steps")


@dataclass
class AMResult:
    control: MLP
    losses: np.ndarray
    snapshots: dict = field(default_factory=dict)


def controlled_memoryless_sde(field, control: MLP, sched, cfg: SamplerConfig, x0, seed=None, noises=None):
    """Forward SDE with drift ``b + sigma u``, i.e. velocity ``v + (sigma / 2) u``; controls are recorded."""

    def velocity(x, t):
        return field(x, t) + 0.5 * cfg.diffusion.sigma(t) * control(x, t)

    return integrate(velocity, sched, cfg, x0, seed=seed, noises=noises, control=control)


def finetune_adjoint_matching(field, sched: InterpolantSchedule, cost, cfg: AMConfig, seed: int = 0,
                              control: Optional[MLP] = None, log_every: int = 0) -> AMResult:
    """Fit an additive control by regressing onto the lean adjoint under the memoryless schedule.

    Each iteration draws fresh controlled SDE paths with the current control
    frozen, integrates the lean adjoint of ``lam * f`` backward (``g = 0``),
    and takes one optimizer step on :func:`am_loss` over a random subset of steps.
    """
    scfg = memoryless_config(sched, cfg.sampler_steps, cfg.t_start)
    if control is None:
        control = control_net(getattr(field, "dim", cost.dim), cfg.hidden, seed=seed)
    base_sum = field.checksum() if hasattr(field, "checksum") else None
    opt = AdamW(control.theta, cfg.optimizer)
    rng = np.random.default_rng([seed, 7])
    losses = np.empty(cfg.steps_total)
    snapshots = {}
    for k in range(cfg.steps_total):
        x0 = draw_initial(seed * 1_000_003 + k, cfg.batch_trajectories, control.dim)
        traj = controlled_memoryless_sde(field, control, sched, scfg, x0, seed=seed * 1_000_003 + k)
        adj = lean_adjoint_backward(field, sched, scfg.diffusion, traj, cost, lam=cfg.lam)
        sub = np.sort(rng.choice(cfg.sampler_steps, size=cfg.subsample_steps, replace=False))
        loss, grad = am_loss(control, traj, adj, scfg.diffusion, sub)
        if not np.isfinite(loss) or loss > 1e8:
            raise TrainingDiverged(f"adjoint-matching loss {loss:.4g} at iteration {k}")
        opt.step(grad)
        losses[k] = loss
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            snapshots[k + 1] = control.theta.copy()
        if log_every and k % log_every == 0:
            logger.info("AM iter %d loss %.5g", k, loss)
    if base_sum is not None and field.checksum() != base_sum:
        raise IntegrityError("base field parameters changed during fine-tuning")
    return AMResult(control, losses, snapshots)


def apply_control_inference(field, control: MLP, sched: InterpolantSchedule, cfg: SamplerConfig, x0) -> Trajectory:
    """Deterministic sampling with the learned control folded into the velocity, ``v + (sigma_mem / 2) u``."""

    def velocity(x, t):
        return field(x, t) + 0.5 * sigma_mem(sched, t) * control(x, t)

    if cfg.mode == SDE:
        raise ValueError("control inference runs the ODE sampler")
    return integrate(velocity, sched, cfg, x0)
