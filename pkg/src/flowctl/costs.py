"""Divergence-based running costs over spatial probability maps.

Scoring functions (:func:`kl_div`, :func:`jsd_normalized`, :func:`focus_cost`, ...)
take :class:`ProbMap` / :class:`SubjectMaps` objects and respect exact zeros.
The state-level path (:class:`MapHead` -> cost -> gradient) works on stacked
arrays of shape ``(B, S, K, G)`` -- batch, subject, map slot, grid cell --
floors maps at ``MAP_FLOOR`` and back-propagates by hand.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.special import xlogy

from .errors import ConfigError, DimensionMismatch, GridMismatch
from .schedules import InterpolantSchedule, sigma_mem

MAP_FLOOR = 1e-12
FOCUS = "focus"
COSINE = "cosine"
COST_KINDS = (FOCUS, COSINE)


@dataclass
class ProbMap:
    weights: np.ndarray
    grid_shape: tuple

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        if int(np.prod(self.grid_shape)) != self.weights.size:
            raise GridMismatch(f"{self.weights.size} weights do not fill grid {self.grid_shape}")
        if np.any(self.weights < 0.0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def flat(cls, weights) -> "ProbMap":
        w = np.asarray(weights, dtype=np.float64).ravel()
        return cls(w, (1, w.size))


@dataclass
class SubjectMaps:
    subject_id: str
    maps: list
    mean_map: ProbMap = field(init=False)

    def __post_init__(self):
        if not self.maps:
            raise ValueError(f"subject {self.subject_id!r} has no maps")
        self.maps = [m if isinstance(m, ProbMap) else ProbMap.flat(m) for m in self.maps]
        _shared_grid(self.maps)
        mean = np.mean([m.weights for m in self.maps], axis=0)
        self.mean_map = ProbMap(mean / mean.sum(), self.maps[0].grid_shape)


def _shared_grid(maps) -> tuple:
    shapes = {m.grid_shape for m in maps}
    if len(shapes) != 1:
        raise GridMismatch(f"maps live on different grids: {sorted(shapes)}")
    return shapes.pop()


def _weights(p):
    return p.weights if isinstance(p, ProbMap) else np.asarray(p, dtype=np.float64).ravel()


def _as_maps(P) -> list:
    return [p if isinstance(p, ProbMap) else ProbMap.flat(p) for p in P]


def kl_div(p, q) -> float:
    """``sum_i p_i log(p_i / q_i)``; ``inf`` when ``q_i = 0 < p_i``."""
    p, q = _as_maps([p, q])
    _shared_grid([p, q])
    pw, qw = p.weights, q.weights
    if np.any((qw == 0.0) & (pw > 0.0)):
        return float("inf")
    mask = pw > 0.0
    return float(np.sum(pw[mask] * np.log(pw[mask] / qw[mask])))


def jsd(P) -> float:
    """Generalized Jensen-Shannon divergence ``(1/n) sum_i KL(p_i || m)`` in nats."""
    P = _as_maps(P)
    _shared_grid(P)
    W = np.stack([p.weights for p in P])
    if np.all(W == W[0]):
        return 0.0
    if np.all(np.count_nonzero(W, axis=0) <= 1):
        # pairwise disjoint supports: every KL(p_i || m) equals log n
        return float(np.log(len(P)))
    m = W.mean(axis=0)
    # KL(p_i || m) is always finite: m_j = 0 forces p_ij = 0
    return max(float(np.mean(np.sum(xlogy(W, W), axis=1)) - np.sum(xlogy(m, m))), 0.0)


def jsd_normalized(P) -> float:
    """``jsd(P) / log n`` in [0, 1]; 0 for a single map."""
    n = len(P)
    if n == 0:
        raise ValueError("empty map set")
    if n == 1:
        _as_maps(P)
        return 0.0
    return min(jsd(P) / np.log(n), 1.0)


def _check_scene(scene, min_subjects=2):
    if len(scene) < min_subjects:
        raise ConfigError(f"need at least {min_subjects} subjects, got {len(scene)}")
    _shared_grid([m for s in scene for m in s.maps])


def focus_cost(scene: Sequence[SubjectMaps]) -> float:
    """Half the mean within-subject dispersion plus half the lack of between-subject separation."""
    _check_scene(scene)
    within = np.mean([jsd_normalized(s.maps) for s in scene])
    between = jsd_normalized([s.mean_map for s in scene])
    return float(0.5 * within + 0.5 * (1.0 - between))


def entropy_regularizer(scene: Sequence[SubjectMaps], gamma_reg: float) -> float:
    """``gamma_reg`` times the mean normalized negentropy of the subject means."""
    if gamma_reg < 0.0:
        raise ValueError("gamma_reg must be nonnegative")
    if gamma_reg == 0.0:
        return 0.0
    _check_scene(scene, 1)
    G = scene[0].mean_map.weights.size
    if G < 2:
        return 0.0
    h = [-np.sum(xlogy(s.mean_map.weights, s.mean_map.weights)) / np.log(G) for s in scene]
    return float(gamma_reg * np.mean(1.0 - np.asarray(h)))


def cosine_separation_cost(scene: Sequence[SubjectMaps]) -> float:
    """Mean pairwise cosine similarity of subject means (lower = more separated)."""
    _check_scene(scene)
    means = [s.mean_map.weights for s in scene]
    sims = [a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in itertools.combinations(means, 2)]
    return float(np.mean(sims))


# ---------------------------------------------------------------------------
# Array path: batched values and gradients with respect to the maps.


def _floor(P):
    G = P.shape[-1]
    return (P + MAP_FLOOR) / (1.0 + G * MAP_FLOOR)


def _jsd_hat_grad(Q):
    """Normalized JSD over axis -2 of ``Q`` and its gradient w.r.t. ``Q``."""
    n = Q.shape[-2]
    if n == 1:
        return np.zeros(Q.shape[:-2]), np.zeros_like(Q)
    m = Q.mean(axis=-2, keepdims=True)
    logq, logm = np.log(Q), np.log(m)
    ln = np.log(n)
    val = (np.sum(Q * logq, axis=(-1, -2)) / n - np.sum(m * logm, axis=(-1, -2))) / ln
    return val, (logq - logm) / (n * ln)


def focus_array(P):
    """FOCUS value ``(B,)`` and gradient ``(B, S, K, G)`` for floored maps ``P``."""
    S, K = P.shape[1], P.shape[2]
    within, g_within = _jsd_hat_grad(P)  # (B, S), (B, S, K, G)
    M = P.mean(axis=2)
    between, g_between = _jsd_hat_grad(M)  # (B,), (B, S, G)
    val = 0.5 * within.mean(axis=1) + 0.5 * (1.0 - between)
    grad = 0.5 / S * g_within - 0.5 / K * g_between[:, :, None, :]
    return val, grad


def cosine_array(P):
    S, K = P.shape[1], P.shape[2]
    M = P.mean(axis=2)
    norms = np.linalg.norm(M, axis=-1)  # (B, S)
    U = M / norms[..., None]
    pairs = list(itertools.combinations(range(S), 2))
    val = np.zeros(P.shape[0])
    gM = np.zeros_like(M)
    for a, b in pairs:
        c = np.sum(U[:, a] * U[:, b], axis=-1)
        val += c
        gM[:, a] += (U[:, b] - c[:, None] * U[:, a]) / norms[:, a, None]
        gM[:, b] += (U[:, a] - c[:, None] * U[:, b]) / norms[:, b, None]
    val /= len(pairs)
    gM /= len(pairs)
    return val, np.repeat(gM[:, :, None, :] / K, K, axis=2)


def entropy_array(P, gamma_reg):
    S, K, G = P.shape[1], P.shape[2], P.shape[3]
    if gamma_reg == 0.0 or G < 2:
        return np.zeros(P.shape[0]), np.zeros_like(P)
    M = P.mean(axis=2)
    lg = np.log(G)
    negent = 1.0 + np.sum(M * np.log(M), axis=-1) / lg  # (B, S)
    gM = gamma_reg / (S * lg) * (np.log(M) + 1.0)
    return gamma_reg * negent.mean(axis=1), np.repeat(gM[:, :, None, :] / K, K, axis=2)


def smoothing_matrix(n: int, width: float) -> np.ndarray:
    """1-D Gaussian smoothing operator with reflecting edges; doubly stochastic."""
    eye = np.eye(n)
    if width <= 0.0:
        return eye
    return gaussian_filter1d(eye, width, axis=0, mode="reflect")


@dataclass(eq=False)
class MapHead:
    """Synthetic per-subject attention maps as a differentiable function of the state.

    Map ``(s, k)`` is the softmax over grid cells of ``-gamma * ||g_j - W_{s,k} x||^2``,
    smoothed on the 2-D grid by a Gaussian of ``smoothing`` cells.
    """

    projections: np.ndarray  # (S, K, 2, d)
    grid_shape: tuple = (8, 8)
    extent: float = 2.0
    gamma: float = 2.0
    smoothing: float = 1.0

    def __post_init__(self):
        self.projections = np.asarray(self.projections, dtype=np.float64)
        if self.projections.ndim != 4 or self.projections.shape[2] != 2:
            raise DimensionMismatch("projections must have shape (S, K, 2, d)")
        H, W = self.grid_shape = tuple(int(s) for s in self.grid_shape)
        ys = np.linspace(-self.extent, self.extent, 2 * H + 1)[1::2]
        xs = np.linspace(-self.extent, self.extent, 2 * W + 1)[1::2]
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        self.anchors = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (G, 2), row-major cells
        self._sy = smoothing_matrix(H, self.smoothing)
        self._sx = smoothing_matrix(W, self.smoothing)

    @classmethod
    def random(cls, n_subjects=2, maps_per_subject=2, dim=2, seed=0, slot_noise=0.15,
               **kw) -> "MapHead":
        """Subjects get independent random projections; slots perturb their subject's projection."""
        rng = np.random.default_rng(seed)
        base = rng.standard_normal((n_subjects, 1, 2, dim)) / np.sqrt(dim)
        slots = base + slot_noise * rng.standard_normal((n_subjects, maps_per_subject, 2, dim))
        return cls(slots, **kw)

    @property
    def n_subjects(self) -> int:
        return self.projections.shape[0]

    @property
    def maps_per_subject(self) -> int:
        return self.projections.shape[1]

    @property
    def dim(self) -> int:
        return self.projections.shape[3]

    @property
    def G(self) -> int:
        return self.anchors.shape[0]

    def _smooth(self, Q):
        H, W = self.grid_shape
        Z = Q.reshape(*Q.shape[:-1], H, W)
        return (self._sy @ Z @ self._sx.T).reshape(Q.shape)

    def _smooth_T(self, G_):
        H, W = self.grid_shape
        Z = G_.reshape(*G_.shape[:-1], H, W)
        return (self._sy.T @ Z @ self._sx).reshape(G_.shape)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"state dim {x.shape[-1]} != head dim {self.dim}")
        return x

    def forward(self, x):
        """Maps of shape ``(B, S, K, G)`` for states ``(B, d)`` plus a backward cache."""
        x = self._check(x).reshape(-1, self.dim)
        c = np.einsum("skij,bj->bski", self.projections, x)
        diff = self.anchors - c[..., None, :]  # (B, S, K, G, 2)
        z = -self.gamma * np.sum(diff**2, axis=-1)
        z -= z.max(axis=-1, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=-1, keepdims=True)
        return self._smooth(q), (q, c)

    def backward(self, cache, gP):
        q, c = cache
        gq = self._smooth_T(gP)
        gz = q * (gq - np.sum(q * gq, axis=-1, keepdims=True))
        gc = 2.0 * self.gamma * (gz @ self.anchors - c * gz.sum(axis=-1, keepdims=True))
        return np.einsum("skij,bski->bj", self.projections, gc)

    def scene(self, P) -> list:
        """Wrap one state's ``(S, K, G)`` maps as :class:`SubjectMaps`."""
        return [SubjectMaps(f"s{s}", [ProbMap(P[s, k], self.grid_shape) for k in range(P.shape[1])])
                for s in range(P.shape[0])]


def maps_from_state(head: MapHead, x) -> list:
    P, _ = head.forward(x)
    return head.scene(P[0])


def _cost_array(kind, P, gamma_reg=0.0):
    if kind == FOCUS:
        val, g = focus_array(P)
    elif kind == COSINE:
        val, g = cosine_array(P)
    else:
        raise ConfigError(f"unknown cost kind {kind!r}; expected one of {COST_KINDS}")
    if gamma_reg:
        rv, rg = entropy_array(P, gamma_reg)
        val, g = val + rv, g + rg
    return val, g


def cost_and_grad_state(head: MapHead, kind: str, x, gamma_reg: float = 0.0):
    """Cost values ``(B,)`` and exact gradients ``(B, d)`` for states ``(B, d)``."""
    x = np.asarray(x, dtype=np.float64)
    P, cache = head.forward(x)
    if kind == COSINE:
        val, gP = _cost_array(kind, P, gamma_reg)
    else:
        val, gP = _cost_array(kind, _floor(P), gamma_reg)
        gP = gP / (1.0 + head.G * MAP_FLOOR)
    return val, head.backward(cache, gP)


def cost_state(head: MapHead, kind: str, x, gamma_reg: float = 0.0):
    x = np.asarray(x, dtype=np.float64)
    P, _ = head.forward(x)
    val, _ = _cost_array(kind, P if kind == COSINE else _floor(P), gamma_reg)
    return val if x.ndim > 1 else float(val[0])


def grad_cost_state(head: MapHead, cost_kind: str, x, gamma_reg: float = 0.0):
    """Gradient of the selected cost composed with the map head, same shape as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    _, g = cost_and_grad_state(head, cost_kind, x, gamma_reg)
    return g.reshape(x.shape)


NO_WEIGHT = "none"
SIGMA_MEM_SQ = "sigma_mem_sq"


@dataclass(eq=False)
class RunningCost:
    """Heuristic ``h(x)`` on a map head, times an optional time weight ``w(t)``.

    With ``weighting="sigma_mem_sq"`` the cost is ``sigma_mem(t)^2 h(x)``, the
    early-strong / late-weak form used for ODE steering. The overall scale
    ``lambda`` is applied by the caller.
    """

    head: MapHead
    kind: str = FOCUS
    gamma_reg: float = 0.0
    weighting: str = NO_WEIGHT
    sched: Optional[InterpolantSchedule] = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.weighting == SIGMA_MEM_SQ and self.sched is None:
            raise ConfigError("sigma_mem_sq weighting needs the interpolant schedule")

    @property
    def dim(self) -> int:
        return self.head.dim

    def weight(self, t: float) -> float:
        if self.weighting == NO_WEIGHT:
            return 1.0
        return sigma_mem(self.sched, t) ** 2

    def heuristic(self, x):
        return cost_state(self.head, self.kind, x, self.gamma_reg)

    def __call__(self, x, t):
        return self.weight(t) * self.heuristic(x)

    def grad(self, x, t):
        return self.weight(t) * grad_cost_state(self.head, self.kind, x, self.gamma_reg)


def write_pgm(path, pm: ProbMap):
    """Binary 16-bit PGM, row-major, scaled so the largest weight maps to 65535."""
    H, W = pm.grid_shape
    peak = pm.weights.max()
    scaled = np.zeros(pm.weights.size) if peak <= 0 else pm.weights / peak
    pixels = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=W * H).reshape(H, W)
