"""Small time-conditioned MLP vector fields and conditional flow-matching training.

Gradients are accumulated by hand in reverse mode: one backward sweep gives
both the parameter gradient and the state vector-Jacobian product, so the
adjoint integrator gets exact ``(dv/dx)^T a`` products.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, TrainingDiverged
from .schedules import InterpolantSchedule

logger = logging.getLogger(__name__)

FIELD_TAG = 0
CONTROL_TAG = 1


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


class MLP:
    """Feed-forward net ``(x, t) -> R^d`` with SiLU hidden activations.

    The time is appended to the state as a raw scalar input. Parameters live in
    one flat float64 vector ``theta``; the per-layer weights are views into it.
    """

    def __init__(self, dim: int, hidden: Sequence[int] = (64, 64, 64),
                 theta: Optional[np.ndarray] = None, tag: int = FIELD_TAG):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.tag = tag
        self.sizes = (self.dim + 1, *self.hidden, self.dim)
        self._shapes = []
        n = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self._shapes.append((n, fan_in, fan_out))
            n += fan_in * fan_out + fan_out
        self.n_params = n
        self.theta = np.zeros(n) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise DimensionMismatch(f"expected {n} parameters, got {self.theta.shape}")

    @classmethod
    def init(cls, dim, hidden=(64, 64, 64), seed=0, tag=FIELD_TAG, zero_last=False) -> "MLP":
        net = cls(dim, hidden, tag=tag)
        rng = np.random.default_rng(seed)
        for i, (W, b) in enumerate(net.layers()):
            W[...] = rng.standard_normal(W.shape) * np.sqrt(1.0 / W.shape[0])
            b[...] = 0.0
        if zero_last:
            W, b = net.layers()[-1]
            W[...] = 0.0
        return net

    def layers(self):
        out = []
        for off, fan_in, fan_out in self._shapes:
            W = self.theta[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            b = self.theta[off + fan_in * fan_out:off + fan_in * fan_out + fan_out]
            out.append((W, b))
        return out

    def copy(self) -> "MLP":
        return MLP(self.dim, self.hidden, self.theta.copy(), tag=self.tag)

    def checksum(self) -> str:
        return hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest()

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"state dim {x.shape[-1]} != field dim {self.dim}")
        batch = x.reshape(-1, self.dim)
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch.shape[0], 1))
        return np.concatenate([batch, tcol], axis=1), x.shape

    def forward(self, x, t, cache=False):
        h, shape = self._inputs(x, t)
        pre, post = [], [h]
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            if i < len(layers) - 1:
                pre.append(z)
                h = silu(z)
                post.append(h)
            else:
                h = z
        out = h.reshape(shape)
        return (out, (pre, post, shape)) if cache else out

    __call__ = forward

    def vjp_state(self, x, t, a):
        _, cache = self.forward(x, t, cache=True)
        return self.backward(cache, a, params=False)[1]

    def backward(self, cache, g_out, params=True, state=True):
        """Reverse sweep for upstream gradient ``g_out`` (same shape as the output).

        Returns ``(grad_theta, grad_x)``; either may be ``None`` if not requested.
        ``grad_theta`` is summed over the batch.
        """
        pre, post, shape = cache
        g = np.asarray(g_out, dtype=np.float64).reshape(-1, self.dim)
        layers = self.layers()
        grad = np.zeros(self.n_params) if params else None
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            if params:
                off, fan_in, fan_out = self._shapes[i]
                grad[off:off + fan_in * fan_out] = (post[i].T @ g).ravel()
                grad[off + fan_in * fan_out:off + fan_in * fan_out + fan_out] = g.sum(axis=0)
            if i == 0 and not state:
                break
            g = g @ W.T
            if i > 0:
                g = g * silu_grad(pre[i - 1])
        gx = g[:, :self.dim].reshape(shape) if state else None
        return grad, gx


def jvp_state(field, x, t, a):
    """``(d v / d x)^T a``, exact; MLPs use one reverse sweep through the net."""
    return field.vjp_state(x, t, a)


@dataclass
class EndpointPair:
    x0: np.ndarray
    x1: np.ndarray


def _endpoints(pair):
    if isinstance(pair, EndpointPair):
        return np.asarray(pair.x0, dtype=np.float64), np.asarray(pair.x1, dtype=np.float64)
    x0, x1 = pair
    return np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)


def _col(t, x):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def interpolate(sched: InterpolantSchedule, pair, t):
    """``beta_t x0 + alpha_t x1``; ``t`` may be one time per row of a batched pair."""
    x0, x1 = _endpoints(pair)
    alpha, beta, _, _ = sched.coeffs(t)
    return _col(beta, x0) * x0 + _col(alpha, x1) * x1


def conditional_velocity(sched: InterpolantSchedule, pair, t):
    """``beta_dot_t x0 + alpha_dot_t x1``."""
    x0, x1 = _endpoints(pair)
    _, _, alpha_dot, beta_dot = sched.coeffs(t)
    return _col(beta_dot, x0) * x0 + _col(alpha_dot, x1) * x1


def cfm_loss(field: MLP, sched: InterpolantSchedule, batch, times):
    """Mean squared regression error onto the conditional velocity, and its parameter gradient.

    ``batch`` is an :class:`EndpointPair` holding ``(B, d)`` arrays or a list of pairs.
    """
    if isinstance(batch, EndpointPair):
        x0, x1 = _endpoints(batch)
    else:
        x0 = np.stack([_endpoints(p)[0] for p in batch])
        x1 = np.stack([_endpoints(p)[1] for p in batch])
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    xt = interpolate(sched, (x0, x1), times)
    target = conditional_velocity(sched, (x0, x1), times)
    pred, cache = field.forward(xt, times, cache=True)
    resid = pred - target
    n = resid.shape[0]
    loss = float(np.sum(resid**2) / n)
    grad, _ = field.backward(cache, 2.0 * resid / n, state=False)
    return loss, grad


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple = (0.95, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """Adam with decoupled weight decay acting on a flat parameter vector in place."""

    def __init__(self, theta: np.ndarray, cfg: AdamWConfig = AdamWConfig()):
        self.theta = theta
        self.cfg = cfg
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self.k = 0

    def step(self, grad, lr=None):
        c = self.cfg
        lr = c.lr if lr is None else lr
        b1, b2 = c.betas
        self.k += 1
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        mhat = self.m / (1.0 - b1**self.k)
        vhat = self.v / (1.0 - b2**self.k)
        self.theta *= 1.0 - lr * c.weight_decay
        self.theta -= lr * mhat / (np.sqrt(vhat) + c.eps)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 256
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    loss_threshold: float = 1.0
    smooth_window: int = 50
    # cosine decay of the learning rate to this fraction of its initial value
    lr_floor: float = 0.05
    seed: int = 0


@dataclass
class TrainResult:
    field: MLP
    losses: np.ndarray
    smoothed_final: float
    converged: bool


def smooth(curve, window=50):
    """Trailing moving average; entry i averages ``curve[max(0, i-window+1): i+1]``."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        return curve
    c = np.concatenate([[0.0], np.cumsum(curve)])
    idx = np.arange(1, curve.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train_cfm(field: MLP, sched: InterpolantSchedule,
              sample_pairs: Callable[[np.random.Generator, int], tuple],
              cfg: TrainConfig = TrainConfig(), log_every: int = 0) -> TrainResult:
    """Fit ``field`` in place with the CFM loss.

    ``sample_pairs(rng, n)`` returns ``(x0, x1)`` arrays of shape ``(n, d)``.
    Times are drawn uniformly on [0, 1].
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(field.theta, cfg.optimizer)
    losses = np.empty(cfg.steps)
    for k in range(cfg.steps):
        x0, x1 = sample_pairs(rng, cfg.batch)
        times = rng.uniform(0.0, 1.0, size=cfg.batch)
        loss, grad = cfm_loss(field, sched, EndpointPair(x0, x1), times)
        if not np.isfinite(loss) or loss > 1e3:
            raise TrainingDiverged(f"CFM loss {loss:.4g} at step {k}")
        frac = k / max(cfg.steps - 1, 1)
        lr = cfg.optimizer.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))
        opt.step(grad, lr=lr)
        losses[k] = loss
        if log_every and k % log_every == 0:
            logger.info("cfm step %d loss %.4f", k, loss)
    final = float(smooth(losses, cfg.smooth_window)[-1]) if cfg.steps else float("nan")
    return TrainResult(field, losses, final, bool(cfg.steps and final < cfg.loss_threshold))
