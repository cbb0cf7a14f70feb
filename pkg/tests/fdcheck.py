"""Central finite differences along random directions."""
import numpy as np


def directional_fd(f, x, d, eps=1e-5):
    return (f(x + eps * d) - f(x - eps * d)) / (2 * eps)


def rel_err(a, b, floor=1e-12):
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe(f, grad, x, n_probes=20, seed=0, eps=1e-5):
    """Worst relative error of ``grad . d`` against central FD of ``f`` over random unit directions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        d = rng.standard_normal(np.shape(x))
        d /= np.linalg.norm(d)
        worst = max(worst, rel_err(np.sum(grad * d), directional_fd(f, x, d, eps)))
    return worst
