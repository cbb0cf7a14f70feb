import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import probe
from flowctl.costs import (
    COSINE,
    FOCUS,
    MapHead,
    ProbMap,
    RunningCost,
    SubjectMaps,
    cosine_separation_cost,
    cost_and_grad_state,
    cost_state,
    entropy_regularizer,
    focus_cost,
    grad_cost_state,
    jsd,
    jsd_normalized,
    kl_div,
    maps_from_state,
    read_pgm,
    smoothing_matrix,
    write_pgm,
)
from flowctl.errors import ConfigError, DimensionMismatch, GridMismatch
from flowctl.schedules import rectified_flow, sigma_mem


def simplex(G):
    return arrays(np.float64, G, elements=st.floats(0.0, 1.0)).filter(lambda w: w.sum() > 1e-3).map(
        lambda w: w / w.sum())


def test_kl_examples():
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))
    assert kl_div([0.5, 0.5], [1.0, 0.0]) == float("inf")
    assert kl_div([0.2, 0.8], [0.2, 0.8]) == 0.0


def test_jsd_examples():
    assert jsd(np.eye(3)) == pytest.approx(np.log(3))
    assert jsd_normalized(np.eye(3)) == 1.0
    assert jsd_normalized([[0.3, 0.7]]) == 0.0
    # two maps: generalized JSD equals the classical one
    p, q = np.array([0.1, 0.9]), np.array([0.6, 0.4])
    m = (p + q) / 2
    assert jsd([p, q]) == pytest.approx(0.5 * kl_div(p, m) + 0.5 * kl_div(q, m), rel=1e-12)


def test_probmap_validation():
    with pytest.raises(GridMismatch):
        ProbMap(np.ones(4) / 4, (3, 3))
    with pytest.raises(ValueError):
        ProbMap(np.array([0.5, 0.6]), (1, 2))
    with pytest.raises(GridMismatch):
        jsd([ProbMap(np.ones(4) / 4, (2, 2)), ProbMap(np.ones(4) / 4, (1, 4))])


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 12).flatmap(lambda G: st.lists(simplex(G), min_size=1, max_size=7)))
def test_jsd_bounds(maps):
    n = len(maps)
    d = jsd(maps)
    assert 0.0 <= d <= np.log(n) + 1e-12
    assert 0.0 <= jsd_normalized(maps) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 10).flatmap(lambda G: st.lists(simplex(G), min_size=2, max_size=6)), st.randoms())
def test_jsd_permutation_invariance(maps, rnd):
    order = list(range(len(maps)))
    rnd.shuffle(order)
    cells = np.random.default_rng(rnd.randint(0, 10_000)).permutation(len(maps[0]))
    base = jsd(maps)
    assert jsd([maps[i] for i in order]) == pytest.approx(base, abs=1e-12)
    assert jsd([m[cells] for m in maps]) == pytest.approx(base, abs=1e-12)


def _scene(*subjects):
    return [SubjectMaps(f"s{i}", [np.asarray(m, dtype=float) for m in maps]) for i, maps in enumerate(subjects)]


def test_focus_examples():
    a, b = [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]
    # consistent within subjects, disjoint between: perfect
    assert focus_cost(_scene([a, a], [b, b])) == 0.0
    # both subjects attend to the same place
    assert focus_cost(_scene([a, a], [a, a])) == 0.5
    # each subject splits across two cells and the subject means coincide: worst case
    assert focus_cost(_scene([a, b], [b, a])) == pytest.approx(1.0)
    u = [0.25] * 4
    assert focus_cost(_scene([u, u], [u, u])) == 0.5


def test_focus_needs_two_subjects():
    with pytest.raises(ConfigError):
        focus_cost(_scene([[0.5, 0.5]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 8).flatmap(lambda G: st.lists(st.lists(simplex(G), min_size=1, max_size=3),
                                                    min_size=2, max_size=4)))
def test_focus_in_unit_interval_and_subject_order_invariant(subjects):
    scene = _scene(*subjects)
    f = focus_cost(scene)
    assert 0.0 <= f <= 1.0
    assert focus_cost(scene[::-1]) == pytest.approx(f, abs=1e-12)


def test_cosine_example():
    assert cosine_separation_cost(_scene([[1.0, 0.0]], [[0.5, 0.5]])) == pytest.approx(np.sqrt(0.5))
    assert cosine_separation_cost(_scene([[1.0, 0.0]], [[0.0, 1.0]])) == 0.0


def test_entropy_regularizer():
    scene = _scene([[1.0, 0.0, 0.0, 0.0]], [[0.25] * 4])
    assert entropy_regularizer(scene, 2.0) == pytest.approx(2.0 * 0.5)
    assert entropy_regularizer(scene, 0.0) == 0.0
    with pytest.raises(ValueError):
        entropy_regularizer(scene, -1.0)


def test_smoothing_matrix_is_doubly_stochastic():
    for n, w in [(8, 1.0), (5, 3.0), (3, 0.0)]:
        S = smoothing_matrix(n, w)
        np.testing.assert_allclose(S.sum(axis=0), 1.0, rtol=1e-12)
        np.testing.assert_allclose(S.sum(axis=1), 1.0, rtol=1e-12)
        assert np.all(S >= 0)


@pytest.fixture
def head():
    return MapHead.random(3, 2, dim=2, seed=4, gamma=1.5, smoothing=1.0)


def test_map_head_outputs_probability_maps(head):
    P, _ = head.forward(np.random.default_rng(0).standard_normal((5, 2)))
    assert P.shape == (5, 3, 2, 64)
    np.testing.assert_allclose(P.sum(axis=-1), 1.0, rtol=1e-12)
    assert np.all(P >= 0)
    scene = maps_from_state(head, np.zeros(2))
    assert len(scene) == 3 and all(len(s.maps) == 2 for s in scene)


def test_map_head_rejects_wrong_state_dim(head):
    with pytest.raises(DimensionMismatch):
        head.forward(np.zeros(3))
    with pytest.raises(DimensionMismatch):
        MapHead(np.zeros((2, 2, 3, 2)))


def test_array_cost_matches_object_cost(head):
    x = np.random.default_rng(1).standard_normal(2)
    scene = maps_from_state(head, x)
    assert cost_state(head, FOCUS, x) == pytest.approx(focus_cost(scene), abs=1e-9)
    assert cost_state(head, COSINE, x) == pytest.approx(cosine_separation_cost(scene), abs=1e-12)
    assert cost_state(head, FOCUS, x, gamma_reg=0.3) == pytest.approx(
        focus_cost(scene) + entropy_regularizer(scene, 0.3), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([FOCUS, COSINE]), st.sampled_from([0.0, 0.5]))
def test_state_gradient_matches_finite_differences(seed, kind, gamma_reg):
    head = MapHead.random(2, 3, dim=3, seed=seed % 17, gamma=1.0)
    x = np.random.default_rng(seed).standard_normal(3)
    g = grad_cost_state(head, kind, x, gamma_reg)
    assert probe(lambda y: cost_state(head, kind, y, gamma_reg), g, x, 3, seed=seed) < 1e-5


def test_batched_gradients_match_single(head):
    x = np.random.default_rng(2).standard_normal((4, 2))
    vals, grads = cost_and_grad_state(head, FOCUS, x)
    for i in range(4):
        assert vals[i] == pytest.approx(cost_state(head, FOCUS, x[i]), rel=1e-12)
        np.testing.assert_allclose(grads[i], grad_cost_state(head, FOCUS, x[i]), rtol=1e-10)


def test_running_cost_weighting(head):
    rf = rectified_flow()
    x = np.ones(2)
    plain = RunningCost(head)
    weighted = RunningCost(head, weighting="sigma_mem_sq", sched=rf)
    assert plain(x, 0.3) == pytest.approx(plain.heuristic(x))
    assert weighted(x, 0.3) == pytest.approx(sigma_mem(rf, 0.3) ** 2 * plain.heuristic(x))
    np.testing.assert_allclose(weighted.grad(x, 0.3), sigma_mem(rf, 0.3) ** 2 * plain.grad(x, 0.3))
    with pytest.raises(ConfigError):
        RunningCost(head, weighting="sigma_mem_sq")
    with pytest.raises(ConfigError):
        RunningCost(head, kind="nope")


def test_pgm_roundtrip(tmp_path):
    w = np.random.default_rng(0).dirichlet(np.ones(12))
    write_pgm(tmp_path / "m.pgm", ProbMap(w, (3, 4)))
    img = read_pgm(tmp_path / "m.pgm")
    assert img.shape == (3, 4)
    assert img.max() == 65535
    np.testing.assert_allclose(img.ravel() / 65535, w / w.max(), atol=1 / 65535)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n65535\n") and len(raw) == len(b"P5\n4 3\n65535\n") + 24
