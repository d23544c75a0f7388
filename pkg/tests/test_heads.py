import numpy as np
import pytest
from hypothesis import given, strategies as st

from conec.errors import InvalidInputError, InvalidShapeError
from conec.heads import LinearHead, StochasticHead, compute_prototypes, replace_means
from conec.losses import cross_entropy
from conec.numkit import finite_diff_grad, make_rng


@given(st.integers(0, 2**31))
def test_cosine_logits_bounded(seed):
    rng = make_rng(seed)
    head = StochasticHead.create(5, 8, rng, eta=16.0, sigma_init=0.5)
    z = rng.standard_normal((6, 8))
    logits = head.forward(z, rng)[0]
    assert np.all(np.abs(logits) <= 16.0 + 1e-12)


def test_deterministic_mode_uses_means():
    rng = make_rng(0)
    head = StochasticHead.create(3, 4, rng, sigma_init=1.0)
    z = rng.standard_normal((2, 4))
    ref = 16.0 * (z / np.linalg.norm(z, axis=1, keepdims=True)) @ (head.mu / np.linalg.norm(head.mu, axis=1, keepdims=True)).T
    assert np.allclose(head.forward_infer(z), ref)
    assert not np.allclose(head.forward_train(z, make_rng(5)), ref)


def test_reparameterized_gradients_match_finite_differences():
    rng = make_rng(3)
    head = StochasticHead.create(4, 6, rng, eta=16.0, sigma_init=0.3)
    z = rng.standard_normal((5, 6))
    y = rng.integers(0, 4, 5)
    logits, cache = head.forward(z, make_rng(11))
    eps = cache[1]
    _, dl = cross_entropy(logits, y)
    grads, dz = head.backward(cache, dl)

    def loss(mu, sigma, zz):
        h = StochasticHead(mu, sigma, 16.0)
        w = h.mu + eps * h.sigma
        zn = zz / np.linalg.norm(zz, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        return cross_entropy(16.0 * zn @ wn.T, y)[0]

    assert np.allclose(grads["mu"], finite_diff_grad(lambda m: loss(m, head.sigma, z), head.mu), atol=1e-8)
    assert np.allclose(grads["sigma"], finite_diff_grad(lambda s: loss(head.mu, s, z), head.sigma), atol=1e-8)
    assert np.allclose(dz, finite_diff_grad(lambda zz: loss(head.mu, head.sigma, zz), z), atol=1e-8)


def test_linear_head_gradients():
    rng = make_rng(4)
    head = LinearHead.create(3, 5, rng)
    head.bias = rng.standard_normal(3)
    z = rng.standard_normal((4, 5))
    y = np.array([0, 2, 1, 2])
    logits, cache = head.forward(z)
    grads, dz = head.backward(cache, cross_entropy(logits, y)[1])
    f = lambda w: cross_entropy(z @ w.T + head.bias, y)[0]
    assert np.allclose(grads["w"], finite_diff_grad(f, head.w), atol=1e-8)
    assert np.allclose(grads["bias"], finite_diff_grad(lambda b: cross_entropy(z @ head.w.T + b, y)[0], head.bias), atol=1e-8)
    assert np.allclose(dz, finite_diff_grad(lambda zz: cross_entropy(zz @ head.w.T + head.bias, y)[0], z), atol=1e-8)


def test_sigma_clamp_and_cosine_variant():
    head = StochasticHead.create(2, 3, make_rng(0))
    head.sigma -= 0.5
    head.post_step()
    assert np.all(head.sigma == 0)
    cos = StochasticHead.create(2, 3, make_rng(0), stochastic=False)
    assert set(cos.params()) == {"mu"} and np.all(cos.sigma == 0)


def test_prototypes_are_class_means():
    rng = make_rng(2)
    z = rng.standard_normal((30, 4))
    y = np.arange(30) % 3
    protos = compute_prototypes(z, y, 3)
    for c in range(3):
        assert np.allclose(protos.means[c], z[y == c].mean(axis=0))
    assert list(protos.counts) == [10, 10, 10]
    head = StochasticHead.create(3, 4, rng)
    new = replace_means(head, protos)
    assert np.array_equal(new.mu, protos.means) and np.array_equal(new.sigma, head.sigma)
    assert new is not head and not np.array_equal(head.mu, new.mu)


def test_prototype_errors():
    with pytest.raises(InvalidInputError, match=r"\[2\]"):
        compute_prototypes(np.ones((4, 2)), [0, 1, 0, 1], 3)
    with pytest.raises(InvalidShapeError):
        replace_means(StochasticHead.create(2, 3, make_rng(0)), compute_prototypes(np.ones((2, 4)), [0, 1], 2))
    with pytest.raises(InvalidInputError):
        StochasticHead.create(2, 3, make_rng(0)).forward(np.zeros((1, 3)))
