import math

import numpy as np
import pytest

from deduce import feature_density, nn_core
from deduce.errors import InputError
from conftest import small_net
from oracles import central_diff, naive_cross_entropy, rel_err, straight_line_forward


def with_biases(params, rng, scale=0.3):
    for _, layer in params.layers():
        layer.bias = rng.normal(0.0, scale, size=layer.bias.shape)
    return params


def random_gmm(rng, classes, dim):
    means = rng.normal(0.0, 1.0, size=(classes, dim))
    covs = []
    for _ in range(classes):
        a = rng.normal(size=(dim, dim))
        covs.append(a @ a.T / dim + 0.5 * np.eye(dim))
    return feature_density.from_covariances(means, np.array(covs))


def draw(seed):
    rng = np.random.default_rng(seed)
    params = with_biases(small_net(seed), rng)
    x = rng.uniform(0.0, 1.0, size=params.input_dim)
    t = int(rng.integers(params.num_classes))
    gmm = random_gmm(rng, params.num_classes, params.feature_dim)
    return params, x, t, gmm


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straight_line_oracle(seed):
    params, x, _, _ = draw(seed)
    logits, feats, _ = nn_core.forward(params, x)
    ref_logits, ref_feats = straight_line_forward(params, x)
    np.testing.assert_allclose(logits, ref_logits, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(feats, ref_feats, rtol=1e-12, atol=1e-12)


def test_batch_forward_rows_equal_single():
    params, _, _, _ = draw(1)
    X = np.random.default_rng(0).uniform(size=(9, params.input_dim))
    logits, feats, _ = nn_core.forward_batch(params, X)
    for i in range(len(X)):
        l1, f1, _ = nn_core.forward(params, X[i])
        np.testing.assert_allclose(logits[i], l1, rtol=0, atol=1e-13)
        np.testing.assert_allclose(feats[i], f1, rtol=0, atol=1e-13)


def test_cross_entropy_matches_naive():
    rng = np.random.default_rng(3)
    for _ in range(200):
        logits = rng.normal(0, 20, size=5)
        t = int(rng.integers(5))
        assert nn_core.cross_entropy(logits, t) == pytest.approx(
            naive_cross_entropy(logits.tolist(), t), rel=1e-12, abs=1e-12)


def test_log_softmax_is_stable_for_huge_logits():
    lp = nn_core.log_softmax(np.array([1e4, 0.0, -1e4]))
    assert np.all(np.isfinite(lp))
    assert lp[0] == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(InputError):
        nn_core.cross_entropy(np.zeros(3), 3)


def test_forward_rejects_wrong_width():
    params, _, _, _ = draw(0)
    with pytest.raises(InputError):
        nn_core.forward(params, np.zeros(params.input_dim + 1))


@pytest.mark.parametrize("seed", range(10))
def test_grad_ce_finite_difference(seed):
    params, x, t, _ = draw(seed)
    spec = nn_core.LossSpec(t)
    g = nn_core.grad_input(params, x, spec)
    fd = central_diff(lambda z: nn_core.cross_entropy(nn_core.forward(params, z)[0], t), x)
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_log_density_finite_difference(seed):
    params, x, t, gmm = draw(seed)
    spec = nn_core.LossSpec(t, ce_weight=0.0, density_weight=1.0, density=gmm)
    g = nn_core.grad_input(params, x, spec)  # gradient of -log p_t

    def neg_logp(z):
        return -feature_density.log_density_class(gmm, nn_core.forward(params, z)[1], t)

    assert rel_err(g, central_diff(neg_logp, x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_weighted_objective(seed):
    params, x, t, gmm = draw(seed)
    lam = 10.0 ** np.random.default_rng(seed).uniform(-1, 2)
    spec = nn_core.LossSpec(t, ce_weight=lam, density_weight=1.0, density=gmm)
    g = nn_core.grad_input(params, x, spec)

    def obj(z):
        logits, feats, _ = nn_core.forward(params, z)
        return (lam * naive_cross_entropy(logits.tolist(), t)
                - feature_density.log_density_class(gmm, feats, t))

    assert rel_err(g, central_diff(obj, x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_normalized_objective_is_gradient_of_log_form(seed):
    # mu*grad(l)/l - grad(log p)/|log p| == grad(mu*log l - sign(log p)*log|log p|)
    params, x, t, gmm = draw(seed)
    mu = 10.0 ** np.random.default_rng(seed).uniform(-1, 1)
    spec = nn_core.LossSpec(t, ce_weight=mu, density_weight=1.0, density=gmm,
                            normalized=True, eps=0.0)
    g, _, _, logp0 = nn_core.grad_input(params, x, spec, return_terms=True)
    s = math.copysign(1.0, logp0)

    def obj(z):
        logits, feats, _ = nn_core.forward(params, z)
        ce = naive_cross_entropy(logits.tolist(), t)
        logp = feature_density.log_density_class(gmm, feats, t)
        return mu * math.log(ce) - s * math.log(abs(logp))

    assert rel_err(g, central_diff(obj, x)) < 1e-4


def test_normalized_equals_frozen_scale_weighted():
    params, x, t, gmm = draw(4)
    spec = nn_core.LossSpec(t, ce_weight=2.0, density_weight=1.0, density=gmm,
                            normalized=True)
    g, _, ce, logp = nn_core.grad_input(params, x, spec, return_terms=True)
    plain = nn_core.LossSpec(t, ce_weight=2.0, density_weight=1.0, density=gmm)
    fd = central_diff(lambda z: nn_core.loss_value(
        params, z, plain, ce_scale=1.0 / (ce + 1e-12),
        density_scale=1.0 / (abs(logp) + 1e-12)), x)
    assert rel_err(g, fd) < 1e-6


def test_density_weight_without_density_rejected():
    params, x, t, _ = draw(0)
    with pytest.raises(InputError):
        nn_core.grad_input(params, x, nn_core.LossSpec(t, density_weight=1.0))


@pytest.mark.parametrize("seed", range(3))
def test_param_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    params = with_biases(small_net(seed, num_blocks=1), rng)
    X = rng.uniform(size=(4, params.input_dim))
    y = rng.integers(params.num_classes, size=4)
    _, grads = nn_core.grad_params(params, X, y)
    for name, tensor in params.parameters():
        flat = tensor.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = nn_core.mean_cross_entropy(params, X, y)
            flat[i] = old - 1e-5
            down = nn_core.mean_cross_entropy(params, X, y)
            flat[i] = old
            fd = (up - down) / 2e-5
            assert grads[name].reshape(-1)[i] == pytest.approx(fd, rel=1e-5, abs=1e-8), name
