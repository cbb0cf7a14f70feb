import numpy as np
import pytest

from flowctl.costs import MapHead
from flowctl.field import MLP, AdamWConfig, TrainConfig, train_cfm
from flowctl.schedules import rectified_flow
from flowctl.toy import GaussianMixture, gaussian

MIXTURE_MEANS = [[-1.5, -1.0], [1.5, 1.0]]
GAUSS_MU = [1.0, -0.5]
GAUSS_STD = 0.5

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; lines are repeated in the terminal summary."""

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rf():
    return rectified_flow()


def _train(target, steps=3000):
    net = MLP.init(2, (64, 64, 64), seed=0)
    res = train_cfm(net, rectified_flow(), target.pairs,
                    TrainConfig(steps=steps, batch=256, optimizer=AdamWConfig(lr=2e-3)))
    return net, res


@pytest.fixture(scope="session")
def mixture():
    return GaussianMixture(np.array(MIXTURE_MEANS), std=0.5)


@pytest.fixture(scope="session")
def mixture_run(mixture):
    return _train(mixture)


@pytest.fixture(scope="session")
def mixture_field(mixture_run):
    return mixture_run[0]


@pytest.fixture(scope="session")
def gauss_run():
    return _train(gaussian(GAUSS_MU, GAUSS_STD))


@pytest.fixture(scope="session")
def gauss_field(gauss_run):
    return gauss_run[0]


@pytest.fixture(scope="session")
def head_a():
    return MapHead.random(2, 2, 2, seed=0, gamma=1.0, smoothing=1.0)


@pytest.fixture(scope="session")
def head_b():
    """Held-out scene with three subjects."""
    return MapHead.random(3, 2, 2, seed=11, gamma=1.0, smoothing=1.0)


@pytest.fixture
def small_net():
    return MLP.init(2, (16, 16), seed=3)
