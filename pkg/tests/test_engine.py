import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deduce import baselines, engine, feature_density, kernels
from deduce.engine import SearchConfig
from deduce.errors import InputError
from conftest import linear_model
from oracles import linear_toy_search

# two pixels, two classes: logit_1 - logit_0 = 3 x0 + x1 - 1
TOY_W = [[0.0, 0.0], [3.0, 1.0]]
TOY_B = [0.0, -1.0]


@pytest.fixture
def toy():
    return linear_model(TOY_W, TOY_B)


def test_jsma_hand_enumerated(toy):
    # x0 has the larger saliency; crossing needs x0 = 0.4 (3 * 0.3 - 1 < 0)
    res = baselines.jsma_generate(toy, np.zeros(2), 1, SearchConfig())
    assert res.success
    assert res.iterations == 4
    np.testing.assert_allclose(res.x_final, [0.4, 0.0], atol=1e-15)
    np.testing.assert_array_equal(res.P, [4, 0])
    assert res.pixels_changed == 1


def test_jsma_cap_moves_to_next_pixel_then_gives_up(toy):
    cfg = SearchConfig(per_pixel_cap=2)
    res = baselines.jsma_generate(toy, np.zeros(2), 1, cfg)
    # x0 twice, x1 twice, then no free pixels: 3*0.2 + 0.2 - 1 < 0
    assert not res.success
    assert res.iterations == 4
    np.testing.assert_allclose(res.x_final, [0.2, 0.2], atol=1e-15)
    np.testing.assert_array_equal(res.P, [2, 2])


def test_already_at_target_takes_zero_iterations(toy):
    x = np.array([1.0, 1.0])
    res = engine.generate(toy, None, x, 1, SearchConfig(density_weight=0.0))
    assert res.success and res.iterations == 0
    np.testing.assert_array_equal(res.x_final, x)
    assert res.pixels_changed == 0


def test_strict_threshold(toy):
    # p_1 exactly 0.5 at x = (1/3, 0): not yet a success
    cfg = SearchConfig(density_weight=0.0, max_iter=0)
    res = engine.generate(toy, None, np.array([1 / 3, 0.0]), 1, cfg)
    assert res.final_target_confidence == pytest.approx(0.5, abs=1e-12)
    assert res.success == (res.final_target_confidence > 0.5)


def toy_density():
    mean = np.array([[0.0, 0.0], [0.9, 0.6]])
    cov = np.array([np.eye(2), [[0.5, 0.1], [0.1, 0.3]]])
    return feature_density.from_covariances(mean, cov)


@pytest.mark.parametrize("momentum", [0.0, 0.6])
@pytest.mark.parametrize("mu", [0.2, 1.0, 5.0])
def test_deduce_matches_reference_loop(toy, mu, momentum):
    gmm = toy_density()
    cfg = SearchConfig(mu=mu, momentum=momentum, step_size=0.05, per_pixel_cap=20)
    for start in ([0.0, 0.0], [0.2, 0.7], [0.05, 0.0]):
        res = engine.generate(toy, gmm, np.array(start), 1, cfg)
        ref_x, ref_k, ref_P = linear_toy_search(
            TOY_W, TOY_B, start, 1, gamma=0.5, delta=0.05, q=1, cap=20, max_iter=700,
            mu=mu, momentum=momentum, density=(gmm.mean[1], gmm.cov[1]))
        assert res.iterations == ref_k
        np.testing.assert_allclose(res.x_final, ref_x, atol=1e-12)
        np.testing.assert_array_equal(res.P, ref_P)


def test_weighted_mode_matches_reference_loop(toy):
    gmm = toy_density()
    cfg = SearchConfig(gradient_mode=engine.WEIGHTED, lam=2.0, momentum=0.0,
                       pixels_per_step=2, step_size=0.05)
    res = engine.generate(toy, gmm, np.zeros(2), 1, cfg)
    ref_x, ref_k, _ = linear_toy_search(
        TOY_W, TOY_B, [0, 0], 1, gamma=0.5, delta=0.05, q=2, cap=10, max_iter=700,
        mu=2.0, density=(gmm.mean[1], gmm.cov[1]), normalized=False)
    assert res.iterations == ref_k
    np.testing.assert_allclose(res.x_final, ref_x, atol=1e-12)


def test_combined_gradient_direction(toy):
    # pure CE in weighted mode: descent = (1 - p_t) * (W_t - W_other)
    cfg = SearchConfig(gradient_mode=engine.WEIGHTED, density_weight=0.0)
    g = engine.combined_gradient(toy, None, np.zeros(2), 1, cfg)
    p1 = 1 / (1 + np.exp(1.0))
    np.testing.assert_allclose(g, (1 - p1) * np.array([3.0, 1.0]), rtol=1e-12)


def test_momentum_gradient():
    np.testing.assert_array_equal(engine.momentum_gradient(np.ones(2), np.ones(2), 0.0), [1, 1])
    np.testing.assert_allclose(engine.momentum_gradient(np.ones(2), np.array([2.0, -1.0]), 0.5),
                               [2.0, 0.5])


def test_select_q_largest_masked():
    g = np.array([0.5, 3.0, 3.0, 1.0, 9.0])
    mask = np.array([True, True, True, True, False])
    np.testing.assert_array_equal(engine.select_q_largest_masked(g, mask, 2), [1, 2])
    np.testing.assert_array_equal(engine.select_q_largest_masked(g, mask, 10), [1, 2, 3, 0])
    assert engine.select_q_largest_masked(g, np.zeros(5, bool), 3).size == 0
    with pytest.raises(InputError):
        engine.select_q_largest_masked(g, mask, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30),
       st.integers(1, 40), st.integers(0, 2**16))
def test_selection_properties(vals, q, seed):
    g = np.array(vals)
    mask = np.random.default_rng(seed).random(len(vals)) < 0.7
    idx = engine.select_q_largest_masked(g, mask, q)
    assert len(idx) == min(q, mask.sum())
    assert len(set(idx.tolist())) == len(idx)
    assert np.all(mask[idx])
    if len(idx) and len(idx) < mask.sum():
        rest = np.setdiff1d(np.flatnonzero(mask), idx)
        assert g[idx].min() >= g[rest].max()


def test_jsma_is_the_search_with_density_off(trained, synthetic):
    _, test_set = synthetic
    for i in range(5):
        x = test_set.images[i]
        t = (int(test_set.labels[i]) + 1) % trained.class_count
        a = baselines.jsma_generate(trained, x, t)
        b = engine.generate(trained, trained.gmm, x, t, engine.jsma_config())
        np.testing.assert_array_equal(a.x_final, b.x_final)
        assert a.iterations == b.iterations


def test_jsma_config_overrides():
    cfg = engine.jsma_config(SearchConfig(pixels_per_step=4, momentum=0.9, mu=3.0))
    assert cfg.gradient_mode == engine.WEIGHTED
    assert (cfg.lam, cfg.density_weight, cfg.momentum, cfg.pixels_per_step) == (1.0, 0.0, 0.0, 1)


@pytest.mark.parametrize("kwargs", [
    dict(target_confidence=1.0), dict(step_size=0.0), dict(pixels_per_step=0),
    dict(per_pixel_cap=0), dict(max_iter=-1), dict(momentum=1.0),
    dict(gradient_mode="other"), dict(mu=-1.0),
])
def test_search_config_validation(kwargs):
    with pytest.raises(InputError):
        SearchConfig(**kwargs)


def test_generate_input_validation(toy):
    with pytest.raises(InputError):
        engine.generate(toy, None, np.zeros(3), 1, SearchConfig(density_weight=0.0))
    with pytest.raises(InputError):
        engine.generate(toy, None, np.zeros(2), 2, SearchConfig(density_weight=0.0))
    with pytest.raises(InputError):
        engine.generate(toy, None, np.zeros(2), 1, SearchConfig())


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_search_is_identical_across_backends(trained, synthetic, backend):
    _, test_set = synthetic
    x = test_set.images[3]
    t = (int(test_set.labels[3]) + 2) % trained.class_count
    previous = kernels.active_backend()
    try:
        kernels.set_backend("python")
        ref = engine.generate(trained, trained.gmm, x, t)
        kernels.set_backend(backend)
        res = engine.generate(trained, trained.gmm, x, t)
    finally:
        kernels.set_backend(previous)
    assert res.iterations == ref.iterations
    np.testing.assert_array_equal(res.P, ref.P)
    np.testing.assert_allclose(res.x_final, ref.x_final, atol=1e-12)


def test_momentum_geometric_series():
    v = np.array([1.0, -2.0])
    c = 0.6
    g = np.zeros(2)
    for k in range(12):
        g = engine.momentum_gradient(v, g, c)
        np.testing.assert_allclose(g, v * (1 - c ** (k + 1)) / (1 - c), rtol=1e-13)
