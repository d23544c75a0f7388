import numpy as np
import pytest
from dataclasses import replace

from conec.backbone import Backbone, BackboneConfig
from conec.engine import Engine, EngineConfig, MetricsRecord, check_invariants, forgetting, run_order, run_router_only
from conec.errors import NumericError, StateError
from conec.heads import StochasticHead
from conec.losses import cross_entropy
from conec.numkit import make_rng
from conec.optim import Sgd
from conec.stream import DomainData, StreamConfig, generate

BB = BackboneConfig(num_layers=3, embed_dim=16, num_tokens=3, num_heads=2, mlp_hidden=24, input_dim=8, seed=0)
STREAM = StreamConfig(num_domains=3, input_dim=8, rotations=(0, 30, -30), train_per_class=60, test_per_class=30)
CFG = EngineConfig(split=1, epochs=3, router_epochs=3)


@pytest.fixture(scope="module")
def domains():
    return generate(STREAM)


@pytest.fixture(scope="module")
def full_run(domains):
    states = []

    def keep(eng, info, rows):
        states.append({
            "heads": {d: {k: v.copy() for k, v in h.params().items()} for d, h in eng.heads.items()},
            "specific": {d: [{t: ad.a.copy() for t, ad in blk.items()} for blk in blocks]
                         for d, blocks in eng.bank.specific.items()},
            "info": info,
        })

    eng, rec = run_order(domains, (1, 2, 3), CFG, Backbone(BB), callback=keep)
    return eng, rec, states


def test_first_domain_has_no_kd(full_run):
    _, _, states = full_run
    assert states[0]["info"]["kd"] is False
    assert all(kd == 0.0 for _, _, kd in states[0]["info"]["history"])
    assert states[1]["info"]["kd"] is True
    assert any(kd > 0 for _, _, kd in states[1]["info"]["history"])


def test_backbone_stays_frozen(domains):
    bb = Backbone(BB)
    before = bb.fingerprint()
    run_order(domains[:1], (1,), replace(CFG, epochs=1, router_epochs=1), bb)
    assert bb.fingerprint() == before == Backbone(BB).fingerprint()


def test_state_structure(full_run):
    eng, _, _ = full_run
    L = eng.backbone.num_layers
    assert sorted(eng.bank.specific) == [1, 2, 3] and sorted(eng.heads) == [1, 2, 3]
    assert sorted(eng.gmms) == [(d, ell) for d in (1, 2, 3) for ell in range(1, L + 1)]
    assert eng.router.domains == [1, 2, 3]
    for blk in eng.bank.shared:
        for ad in blk.values():
            assert np.abs(ad.b @ ad.b.T - np.eye(ad.rank)).max() < 1e-8


def test_parameter_isolation(full_run):
    eng, _, states = full_run
    for step, snap in enumerate(states):
        for d, params in snap["heads"].items():
            for k, v in params.items():
                assert np.array_equal(v, eng.heads[d].params()[k])
        for d, blocks in snap["specific"].items():
            for i, blk in enumerate(blocks):
                for t, a in blk.items():
                    assert np.array_equal(a, eng.bank.specific[d][i][t].a)


def test_no_routed_above_oracle_rows_on_small_run(full_run):
    # not guaranteed in general; holds on this configuration
    _, rec, _ = full_run
    assert check_invariants(rec) == []


def test_specific_only_has_exact_zero_forgetting(domains):
    cfg = replace(CFG, method="specific_only")
    _, rec = run_order(domains, (2, 3, 1), cfg, Backbone(BB))
    for d in (2, 3):
        assert forgetting(rec, d, "oracle_accuracy") == 0.0


def test_retraining_a_domain_fails(domains):
    eng = Engine(replace(CFG, epochs=1), Backbone(BB), 4, 3)
    eng.train_domain(domains[0])
    with pytest.raises(StateError):
        eng.train_domain(domains[0])
    with pytest.raises(StateError):
        eng.train_router_step(domains[1])


def test_nan_loss_aborts(domains):
    d = domains[0]
    bad = DomainData(1, d.x_train.copy(), d.y_train, d.x_test, d.y_test)
    bad.x_train[3, 0] = np.nan
    with pytest.raises(NumericError, match="domain 1"):
        Engine(CFG, Backbone(BB), 4, 3).train_domain(bad)


def test_single_domain_inference(domains):
    eng = Engine(replace(CFG, epochs=2, router_epochs=1), Backbone(BB), 4, 3)
    with pytest.raises(StateError):
        eng.infer(domains[0].x_test)
    eng.train_domain(domains[0])
    eng.train_router_step(domains[0])
    labels, doms, exits = eng.infer(domains[0].x_test)
    assert np.all(doms == 1)
    assert exits.min() >= 1 and exits.max() <= 3
    emb = eng.embed(domains[0].x_test, 1)
    assert np.array_equal(labels, eng.heads[1].forward_infer(emb).argmax(axis=1))
    y, b, e = eng.infer(domains[0].x_test[0])
    assert (y, b, e) == (labels[0], 1, exits[0])
    rows = eng.evaluate(domains[:1])
    rec = MetricsRecord(0, (1,), rows)
    assert rec.avg() == rec.last() == rows[0]["accuracy"]
    assert rows[0]["dc_accuracy"] == 1.0


def test_metrics_aggregates():
    rows = [
        {"after_domain": 1, "eval_domain": 1, "accuracy": 1.0},
        {"after_domain": 2, "eval_domain": 1, "accuracy": 0.5},
        {"after_domain": 2, "eval_domain": 2, "accuracy": 1.0},
    ]
    rec = MetricsRecord(0, (1, 2), rows)
    assert rec.last() == 0.75 and rec.avg() == pytest.approx((1.0 + 0.75) / 2)
    assert forgetting(rec, 1) == 0.5


def test_one_epoch_separable_two_class():
    rng = make_rng(0)
    n = 200
    y = np.repeat([0, 1], n)
    x = rng.standard_normal((2 * n, 8)) * 0.5
    x[:, 0] += np.where(y == 0, -3.0, 3.0)
    perm = rng.permutation(2 * n)
    data = DomainData(1, x[perm], y[perm], x[perm], y[perm])
    cfg = replace(CFG, lambda_kd=0.0, epochs=1, router_epochs=1, clamp_sigma=False)
    bb = Backbone(BB)
    eng = Engine(cfg, bb, 2, 1)
    eng.train_domain(data)
    acc = np.mean(eng.predict_with_domain(data.x_train, 1) == data.y_train)
    # oracle: cosine head trained for one epoch directly on frozen features
    feats = bb.forward_plain(data.x_train).cls_at(3)
    head = StochasticHead.create(2, bb.dim, make_rng(1), stochastic=False)
    opt = Sgd(head.params(), 0.02, 0.9)
    for s in range(0, 2 * n, 64):
        logits, cache = head.forward(feats[s:s + 64])
        opt.step(head.backward(cache, cross_entropy(logits, data.y_train[s:s + 64])[1])[0])
    oracle = np.mean(head.forward_infer(feats).argmax(axis=1) == data.y_train)
    assert oracle >= 0.95 and acc >= 0.95


def test_checkpoint_round_trip(full_run, domains, tmp_path):
    eng, rec, _ = full_run
    path = tmp_path / "ck.bin"
    eng.save(path, rec, extra={"note": 1})
    back, stored = Engine.load(path)
    assert stored.rows == rec.rows and back.extra == {"note": 1}
    assert back.evaluate(domains) == rec.step_rows(3)
    assert back.backbone.fingerprint() == eng.backbone.fingerprint()
    with open(path, "rb") as fh:
        assert fh.read(9) == b"CONEC-CK1"


def test_router_only_matches_full_run(full_run, domains):
    eng, rec, _ = full_run
    _, accs = run_router_only(domains, (1, 2, 3), CFG, Backbone(BB))
    assert accs == [r["dc_accuracy"] for r in rec.step_rows(3)]


def test_finetune_keeps_one_adapter_set(domains):
    eng, rec = run_order(domains[:2], (1, 2), replace(CFG, method="finetune", epochs=1), Backbone(BB))
    assert eng.bank.specific == {} and len(eng.bank.shared) == 3 and list(eng.heads) == [0]
    assert rec.rows[0]["dc_accuracy"] is None


def test_run_is_deterministic(domains):
    cfg = replace(CFG, epochs=1, router_epochs=1)
    a = run_order(domains, (3, 1, 2), cfg, Backbone(BB))[1]
    b = run_order(domains, (3, 1, 2), cfg, Backbone(BB))[1]
    assert a.rows == b.rows
