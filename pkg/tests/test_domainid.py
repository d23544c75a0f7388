import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from conec.backbone import Backbone, BackboneConfig
from conec.domainid import (DomainRouterState, aux_loss_and_grads, layer_confidence, route, synthetic_count,
                            train_router)
from conec.errors import ConfigError, StateError
from conec.mixtures import fit_em, sample
from conec.numkit import finite_diff_grad, make_rng


def _two_domains(rng, n=300, d=8, gap=6.0):
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d))
    b[:, 0] += gap
    return a, b


@pytest.fixture(scope="module")
def trained_router():
    """Router over a real backbone trace with three shifted input domains."""
    bb = Backbone(BackboneConfig(num_layers=3, embed_dim=16, num_tokens=3, mlp_hidden=24, input_dim=6, seed=1))
    rng = make_rng(0)
    shifts = [np.zeros(6), np.r_[4.0, 0, 0, 0, 0, 0], np.r_[0, -4.0, 0, 0, 0, 0]]
    xs = [rng.standard_normal((200, 6)) + s for s in shifts]
    router = DomainRouterState.create(3, 16, 3, make_rng(1))
    gmms = {}
    for b, x in enumerate(xs, 1):
        tr = bb.forward_plain(x)
        real = [tr.cls_at(ell) for ell in range(1, 4)]
        router.centers[b] = np.stack([z.mean(axis=0) for z in real])
        for ell in range(1, 4):
            gmms[(b, ell)] = fit_em(real[ell - 1], 2, make_rng(b * 10 + ell))
        syn = {d: [sample(gmms[(d, ell)], 100, rng) for ell in range(1, 4)] for d in router.domains}
        train_router(router, real, b, syn, make_rng(100 + b), epochs=20, lr_tm=1e-2, lr_dc=1e-2)
    test = np.concatenate([rng.standard_normal((100, 6)) + s for s in shifts])
    # oracle: logistic regression on the deepest CLS rows with all domains' real data
    feats = np.concatenate([bb.forward_plain(x).cls_at(3) for x in xs])
    oracle = LogisticRegression(max_iter=2000).fit(feats, np.repeat([1, 2, 3], 200))
    trace = bb.forward_plain(test)
    router.oracle_acc = oracle.score(trace.cls_at(3), np.repeat([1, 2, 3], 100))
    return bb, router, trace


def test_threshold_zero_exits_at_first_layer(trained_router):
    _, router, trace = trained_router
    router.threshold = 0.0
    _, exits = route(router, trace)
    assert np.all(exits == 1)


def test_threshold_above_one_is_argmax_over_layers(trained_router):
    _, router, trace = trained_router
    router.threshold = 1.5
    doms, exits = route(router, trace)
    probs = np.stack([router.probs(trace.cls_at(ell), ell) for ell in range(1, 4)], axis=1)  # (N, L, D)
    conf = probs.max(axis=2)
    best = conf.argmax(axis=1)
    expect = np.asarray(router.domains)[probs[np.arange(len(best)), best].argmax(axis=1)]
    assert np.array_equal(doms, expect)
    assert np.array_equal(exits, best + 1)


def test_unanimous_layers_ignore_threshold(trained_router):
    _, router, trace = trained_router
    per_layer = np.stack([layer_confidence(router, trace, ell)[0] for ell in range(1, 4)], axis=1)
    unanimous = np.all(per_layer == per_layer[:, :1], axis=1)
    assert unanimous.sum() > 0
    answers = []
    for t in (0.0, 0.5, 0.9, 0.99, 2.0):
        router.threshold = t
        answers.append(route(router, trace)[0][unanimous])
    router.threshold = 0.9
    assert all(np.array_equal(a, answers[0]) for a in answers)


def test_router_accuracy_and_exit_range(trained_router):
    _, router, trace = trained_router
    router.threshold = 0.9
    doms, exits = route(router, trace)
    truth = np.repeat([1, 2, 3], 100)
    assert np.mean(doms == truth) >= router.oracle_acc - 0.05
    assert exits.min() >= 1 and exits.max() <= 3
    single = route(router, type(trace)([m[0] for m in trace.layers]))
    assert single == (int(doms[0]), int(exits[0]))


def test_separable_domains_match_logistic_oracle():
    rng = make_rng(3)
    a, b = _two_domains(rng)
    ta, tb = _two_domains(rng, 200)
    oracle = LogisticRegression().fit(np.concatenate([a, b]), np.repeat([0, 1], 300))
    oracle_acc = oracle.score(np.concatenate([ta, tb]), np.repeat([0, 1], 200))
    assert oracle_acc >= 0.99
    router = DomainRouterState.create(1, 8, 2, make_rng(4))
    router.centers = {1: a.mean(axis=0)[None], 2: b.mean(axis=0)[None]}
    train_router(router, [a], 1, {}, make_rng(5), epochs=5)
    train_router(router, [b], 2, {1: [a]}, make_rng(6), epochs=20, lr_tm=1e-2, lr_dc=1e-2)
    pred = np.asarray(router.domains)[router.probs(np.concatenate([ta, tb]), 1).argmax(axis=1)]
    assert np.mean(pred == np.repeat([1, 2], 200)) >= 0.99


def test_aux_gradients_match_finite_differences():
    rng = make_rng(7)
    router = DomainRouterState.create(1, 5, 3, rng, hidden=7)
    tm, dc = router.transforms[0], router.classifiers[0]
    z = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)
    centers = rng.standard_normal((3, 5))

    def total(**kw):
        old = {k: getattr(tm, k) for k in kw if hasattr(tm, k) and k != "w"}
        for k, v in kw.items():
            setattr(dc if k in ("w", "bias") else tm, k, v)
        ce, ball, _, _ = aux_loss_and_grads(tm, dc, z, y, centers, 3, 2.0, 1.0)
        return ce + 2.0 * ball

    ce, ball, g_tm, g_dc = aux_loss_and_grads(tm, dc, z, y, centers, 3, 2.0, 1.0)
    for name in ("w1", "b1", "w2", "b2"):
        orig = getattr(tm, name).copy()
        fd = finite_diff_grad(lambda v: total(**{name: v}), orig)
        setattr(tm, name, orig)
        assert np.allclose(g_tm[name], fd, rtol=1e-4, atol=1e-6), name
    orig = dc.w.copy()
    fd = finite_diff_grad(lambda v: total(w=v), orig)
    dc.w = orig
    assert np.allclose(g_dc["w"], fd, rtol=1e-4, atol=1e-6)


def test_masked_logits_and_errors():
    router = DomainRouterState.create(2, 4, 5, make_rng(0))
    with pytest.raises(StateError):
        router.probs(np.ones((1, 4)), 1)
    z = make_rng(1).standard_normal((3, 4))
    train_router(router, [z, z], 7, {}, make_rng(2), epochs=1)
    assert router.domains == [7]
    p = router.probs(z, 2)
    assert np.allclose(p[:, 0], 1.0) and np.all(p[:, 1:] == 0)
    with pytest.raises(StateError):
        train_router(router, [z, z], 7, {}, make_rng(2))
    with pytest.raises(ConfigError):
        train_router(router, [z, z], 8, {}, make_rng(2))


def test_synthetic_count():
    assert synthetic_count(800, 0) == 0
    assert synthetic_count(800, 4) == 200
    assert synthetic_count(10_000, 1) == 512
    assert synthetic_count(3, 5) == 1
