"""Per-domain training, domain routing, inference, evaluation and checkpoints.

One ``Engine`` owns a frozen backbone, the adapter bank, one classifier head
per trained domain, the domain router and the replay mixtures. Domains are
trained one at a time: first the adapters and the temporary head, then the
router on adapter-free embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from conec.adapters import AdapterBank, SharedSnapshot, apply_redistribution
from conec.backbone import Backbone, BackboneConfig
from conec.domainid import DomainRouterState, route, synthetic_count, train_router
from conec.errors import ConfigError, InvalidInputError, NumericError, StateError
from conec.heads import LinearHead, StochasticHead, compute_prototypes, replace_means
from conec.losses import cross_entropy, joint_dil_loss, kd_loss
from conec.mixtures import GmmModel, fit_em, sample
from conec.numkit import keyed_rng
from conec.optim import Sgd, sgd_step
from conec.serialize import read_container, write_container
from conec.stream import DomainData

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "CONEC-CK1"
METHODS = ("conec", "finetune", "specific_only")
HEAD_TYPES = ("stochastic", "cosine", "linear")
ROUTER_LAYERS = ("all", "last")

__all__ = ["Engine", "EngineConfig", "MetricsRecord", "check_invariants", "run_order", "run_router_only", "sgd_step"]


@dataclass
class EngineConfig:
    lambda_kd: float = 5.0
    lambda_ball: float = 2.0
    kd_temperature: float = 2.0
    threshold: float = 0.9
    margin: float = 1.0
    rank: int = 8
    lr_lora: float = 0.02
    lr_head: float = 0.02
    lr_dc: float = 2e-3
    lr_tm: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    router_epochs: int = 20
    split: int = 3
    eta: float = 16.0
    sigma_init: float = 0.1
    gmm_components: int = 2
    gmm_max_iter: int = 100
    lora_targets: tuple[str, ...] = ("q", "v")
    train_specific_b: bool = False
    method: str = "conec"
    head_type: str = "stochastic"
    use_ball: bool = True
    router_layers: str = "all"
    redistribute: bool = True
    sample_at_inference: bool = False
    clamp_sigma: bool = True  # project head sigma onto >= 0 after each step
    seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"head_type must be one of {HEAD_TYPES}, got {self.head_type!r}")
        if self.router_layers not in ROUTER_LAYERS:
            raise ConfigError(f"router_layers must be one of {ROUTER_LAYERS}")
        positive = ("kd_temperature", "rank", "lr_lora", "lr_head", "lr_dc", "lr_tm", "batch_size", "eta", "gmm_components")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_kd", "lambda_ball", "margin", "threshold", "sigma_init", "momentum", "epochs", "router_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.split < 0:
            raise ConfigError("split must be non-negative")


@dataclass
class MetricsRecord:
    """Accuracy rows for one domain order; one row per (after_domain, eval_domain)."""

    order_id: int
    order: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)

    def steps(self) -> list[int]:
        seen = []
        for r in self.rows:
            if r["after_domain"] not in seen:
                seen.append(r["after_domain"])
        return seen

    def step_rows(self, after_domain: int) -> list[dict]:
        return [r for r in self.rows if r["after_domain"] == after_domain]

    def _mean(self, rows, key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    def avg(self, key: str = "accuracy") -> float:
        """Mean over training steps of the mean accuracy over seen domains."""
        return float(np.mean([self._mean(self.step_rows(s), key) for s in self.steps()]))

    def last(self, key: str = "accuracy") -> float:
        return self._mean(self.step_rows(self.steps()[-1]), key)

    def accuracy(self, after_domain: int, eval_domain: int, key: str = "accuracy") -> float:
        for r in self.rows:
            if r["after_domain"] == after_domain and r["eval_domain"] == eval_domain:
                return r[key]
        raise KeyError((after_domain, eval_domain))

    def dc_last(self) -> float | None:
        return self._mean(self.step_rows(self.steps()[-1]), "dc_accuracy")

    def summary(self) -> dict:
        dc = self.dc_last()
        return {
            "order_id": self.order_id,
            "order": list(self.order),
            "avg": self.avg(),
            "last": self.last(),
            "oracle_avg": self.avg("oracle_accuracy"),
            "oracle_last": self.last("oracle_accuracy"),
            "dc_last": dc,
        }


class Engine:
    def __init__(self, config: EngineConfig | None = None, backbone: Backbone | None = None,
                 num_classes: int = 4, max_domains: int = 5):
        self.config = config or EngineConfig()
        self.backbone = backbone or Backbone(BackboneConfig(seed=self.config.seed))
        c = self.config
        L = self.backbone.num_layers
        if c.method == "finetune":
            split = L
        elif c.method == "specific_only":
            split = 0
        else:
            split = c.split
            if not 0 < split < L:
                raise ConfigError(f"split {split} must lie strictly between 0 and {L}")
        self.num_classes = num_classes
        self.max_domains = max_domains
        init_rng = keyed_rng(c.seed, 1)
        self.bank = AdapterBank.create(L, split, c.rank, self.backbone.dim, init_rng, c.lora_targets, c.train_specific_b)
        self.heads: dict[int, StochasticHead | LinearHead] = {}
        self.snapshot: SharedSnapshot | None = None
        self.router: DomainRouterState | None = None
        if self.uses_router:
            layers = (L,) if c.router_layers == "last" else ()
            self.router = DomainRouterState.create(L, self.backbone.dim, max_domains, keyed_rng(c.seed, 2),
                                                   threshold=c.threshold, layers=layers)
        self.gmms: dict[tuple[int, int], GmmModel] = {}
        self.trained: list[int] = []
        self.router_trained: list[int] = []
        self.extra: dict = {}

    @property
    def uses_router(self) -> bool:
        return self.config.method != "finetune"

    @property
    def split(self) -> int:
        return self.bank.split

    # ------------------------------------------------------------------ training

    def _new_head(self, rng):
        c = self.config
        if c.head_type == "linear":
            return LinearHead.create(self.num_classes, self.backbone.dim, rng)
        return StochasticHead.create(self.num_classes, self.backbone.dim, rng, c.eta, c.sigma_init,
                                     stochastic=c.head_type == "stochastic")

    def adapter_params(self, domain):
        """Named trainable adapter arrays for a forward routed to ``domain``."""
        params = {}
        for i, blk in enumerate(self.bank.shared):
            for t, ad in blk.items():
                params[f"shared.{i}.{t}.a"] = ad.a
        if domain is not None and domain in self.bank.specific:
            for i, blk in enumerate(self.bank.specific[domain]):
                for t, ad in blk.items():
                    params[f"spec.{i}.{t}.a"] = ad.a
                    if ad.train_b:
                        params[f"spec.{i}.{t}.b"] = ad.b
        return params

    def _adapter_grads(self, grads, out, scale=1.0, masks=None, only_shared=False):
        for i, blk in enumerate(grads):
            shared = i < self.split
            if only_shared and not shared:
                continue
            for t, (ga, gb) in blk.items():
                if shared:
                    if masks is not None:
                        ga = apply_redistribution(ga, masks[i][t])
                    key = f"shared.{i}.{t}.a"
                else:
                    key = f"spec.{i - self.split}.{t}.a"
                out[key] = out.get(key, 0.0) + scale * ga
                bkey = f"spec.{i - self.split}.{t}.b"
                if not shared and self.bank.train_specific_b:
                    out[bkey] = out.get(bkey, 0.0) + scale * gb
        return out

    def loss_and_grads(self, head, x, y, domain, rng=None, kd_on=False, masks=None, teacher_head=None):
        """Joint objective on one batch and the gradients of every trainable array.

        Returns ``(LossReport, adapter_grads, head_grads)``. With ``masks`` the
        KD part of the shared up-projection gradients is redistributed row-wise.
        Teacher logits are constants; ``teacher_head`` (default ``head``) scores them.
        """
        c = self.config
        L = self.backbone.num_layers
        blocks = self.bank.blocks_for(domain if domain in self.bank.specific else None)
        trace = self.backbone.run(x, blocks, keep_cache=True)
        emb = trace.cls_at(L)
        logits, hcache = head.forward(emb, rng)
        ce, dlogits = cross_entropy(logits, y)
        g_head, demb = head.backward(hcache, dlogits)
        inj = np.zeros_like(trace.layers[L])
        inj[:, 0, :] = demb
        g_ad = self._adapter_grads(self.backbone.backward(trace, {L: inj}), {})
        kd = 0.0
        if kd_on:
            teacher = self.backbone.run(x, self.snapshot.adapters, upto=self.split)
            t_logits = (teacher_head or head).forward(teacher.cls_at(self.split))[0]
            s_logits, scache = head.forward(trace.cls_at(self.split))
            kd, ds = kd_loss(s_logits, t_logits, c.kd_temperature)
            g_head_kd, dstud = head.backward(scache, ds)
            for k, g in g_head_kd.items():
                g_head[k] = g_head[k] + c.lambda_kd * g
            inj = np.zeros_like(trace.layers[self.split])
            inj[:, 0, :] = dstud
            g_kd = self.backbone.backward(trace, {self.split: inj})
            self._adapter_grads(g_kd, g_ad, c.lambda_kd, masks, only_shared=True)
        report = joint_dil_loss(ce, kd, c.lambda_kd)
        return report, g_ad, g_head

    def train_domain(self, data: DomainData) -> dict:
        """Train adapters and a temporary head on one domain, then fix prototypes."""
        c = self.config
        b = data.domain
        if b in self.trained:
            raise StateError(f"domain {b} has already been trained")
        step = len(self.trained)
        rng = keyed_rng(c.seed, 10, step, b)
        if c.method == "finetune":
            head = self.heads.get(0) or self._new_head(rng)
            domain = None
        else:
            if self.bank.num_layers > self.split:
                self.bank.add_domain(b, rng)
            head = self._new_head(rng)
            domain = b
        params = self.adapter_params(domain)
        kd_on = c.method == "conec" and step > 0 and c.lambda_kd > 0 and self.split > 0
        masks = self.snapshot.masks() if (kd_on and c.redistribute) else None
        opt_ad = Sgd(params, c.lr_lora, c.momentum)
        opt_head = Sgd(head.params(), c.lr_head, c.momentum)
        sample_rng = rng if c.head_type == "stochastic" else None
        n = len(data.y_train)
        history = []
        for epoch in range(c.epochs):
            perm = rng.permutation(n)
            totals = np.zeros(3)
            for start in range(0, n, c.batch_size):
                idx = perm[start : start + c.batch_size]
                rep, g_ad, g_head = self.loss_and_grads(head, data.x_train[idx], data.y_train[idx], domain,
                                                        sample_rng, kd_on, masks)
                if not np.isfinite(rep.total):
                    raise NumericError(f"non-finite loss on domain {b}, epoch {epoch}: ce={rep.ce}, kd={rep.kd}")
                opt_ad.step(g_ad)
                opt_head.step(g_head)
                if c.clamp_sigma:
                    head.post_step()
                totals += (rep.total * len(idx), rep.ce * len(idx), rep.kd * len(idx))
            history.append(tuple(totals / n))
            log.debug("domain %d epoch %d loss %.4f ce %.4f kd %.4f", b, epoch, *history[-1])

        if c.head_type != "linear":
            emb = self.embed(data.x_train, domain)
            head = replace_means(head, compute_prototypes(emb, data.y_train, self.num_classes))
        self.heads[0 if c.method == "finetune" else b] = head
        self.snapshot = self.bank.snapshot()
        self.trained.append(b)
        return {"domain": b, "history": history, "kd": kd_on}

    def train_router_step(self, data: DomainData) -> None:
        """Centres, replay mixtures and router update for the domain just trained."""
        if not self.uses_router:
            return
        c = self.config
        b = data.domain
        if b not in self.trained:
            raise StateError(f"train_domain must run before the router step for domain {b}")
        L = self.backbone.num_layers
        step = len(self.router_trained)
        rng = keyed_rng(c.seed, 20, step, b)
        trace = self.backbone.forward_plain(data.x_train)
        real = [trace.cls_at(ell) for ell in range(1, L + 1)]
        self.router.centers[b] = np.stack([z.mean(axis=0) for z in real])
        for ell in range(1, L + 1):
            self.gmms[(b, ell)] = fit_em(real[ell - 1], c.gmm_components, rng, c.gmm_max_iter, layer=ell, domain=b)
        past = list(self.router.domains)
        n_syn = synthetic_count(len(data.y_train), len(past))
        synthetic = {}
        for d in past:
            missing = [ell for ell in range(1, L + 1) if (d, ell) not in self.gmms]
            if missing:
                raise ConfigError(f"no mixture for past domain {d} at layers {missing}")
            synthetic[d] = [sample(self.gmms[(d, ell)], n_syn, rng) for ell in range(1, L + 1)]
        train_router(self.router, real, b, synthetic, rng, epochs=c.router_epochs, lambda_ball=c.lambda_ball,
                     margin=c.margin, lr_tm=c.lr_tm, lr_dc=c.lr_dc, batch_size=c.batch_size,
                     momentum=c.momentum, use_ball=c.use_ball)
        self.router_trained.append(b)

    # ----------------------------------------------------------------- inference

    def embed(self, x, domain: int | None) -> np.ndarray:
        blocks = self.bank.blocks_for(domain if domain in self.bank.specific else None)
        return self.backbone.run(x, blocks).cls_at(self.backbone.num_layers)

    def _head_for(self, domain):
        return self.heads[0] if self.config.method == "finetune" else self.heads[domain]

    def predict_with_domain(self, x, domains) -> np.ndarray:
        x = np.atleast_2d(x)
        domains = np.broadcast_to(np.asarray(domains), (x.shape[0],))
        labels = np.empty(x.shape[0], dtype=np.int64)
        for d in np.unique(domains):
            idx = np.flatnonzero(domains == d)
            dom = None if self.config.method == "finetune" else int(d)
            emb = self.embed(x[idx], dom)
            head = self._head_for(dom)
            rng = keyed_rng(self.config.seed, 30, int(d)) if self.config.sample_at_inference and isinstance(head, StochasticHead) else None
            labels[idx] = head.forward(emb, rng)[0].argmax(axis=1)
        return labels

    def route(self, x):
        """(domain ids, exit layers) from the router on the adapter-free trace."""
        x = np.atleast_2d(x)
        if not self.trained:
            raise StateError("no domain has been trained")
        if not self.uses_router:
            return np.full(x.shape[0], -1), np.zeros(x.shape[0], dtype=np.int64)
        return route(self.router, self.backbone.forward_plain(x))

    def infer(self, x):
        """Predicted labels, domains and exit layers; a single sample gives scalars."""
        single = np.ndim(x) == 1
        doms, exits = self.route(x)
        labels = self.predict_with_domain(x, doms)
        if single:
            return int(labels[0]), int(doms[0]), int(exits[0])
        return labels, doms, exits

    def evaluate(self, domains: list[DomainData], order_id: int = 0) -> list[dict]:
        """One row per seen domain: routed, oracle and domain-classification accuracy."""
        if not self.trained:
            raise StateError("no domain has been trained")
        rows = []
        for data in domains:
            labels, doms, exits = self.infer(data.x_test)
            oracle = self.predict_with_domain(data.x_test, data.domain) if self.uses_router else labels
            dc = float(np.mean(doms == data.domain)) if self.uses_router else None
            rows.append({
                "order_id": order_id,
                "after_domain": self.trained[-1],
                "eval_domain": data.domain,
                "accuracy": float(np.mean(labels == data.y_test)),
                "dc_accuracy": dc,
                "oracle_accuracy": float(np.mean(oracle == data.y_test)),
                "exit_layer_mean": float(np.mean(exits)) if self.uses_router else None,
            })
        return rows

    # --------------------------------------------------------------- checkpoint

    def save(self, path, record: MetricsRecord | None = None, extra: dict | None = None) -> None:
        arrays = self.backbone.to_arrays("bb.")
        for i, blk in enumerate(self.bank.shared):
            for t, ad in blk.items():
                arrays[f"shared.{i}.{t}.a"] = ad.a
                arrays[f"shared.{i}.{t}.b"] = ad.b
        for d, blocks in self.bank.specific.items():
            for i, blk in enumerate(blocks):
                for t, ad in blk.items():
                    arrays[f"spec.{d}.{i}.{t}.a"] = ad.a
                    arrays[f"spec.{d}.{i}.{t}.b"] = ad.b
        head_kinds = {}
        for d, h in self.heads.items():
            head_kinds[str(d)] = type(h).__name__
            for k, v in h.params().items():
                arrays[f"head.{d}.{k}"] = v
            if isinstance(h, StochasticHead) and not h.train_sigma:
                arrays[f"head.{d}.sigma"] = h.sigma
        if self.snapshot is not None:
            for i, blk in enumerate(self.snapshot.adapters):
                for t, ad in blk.items():
                    arrays[f"snap.{i}.{t}.a"] = ad.a
        if self.router is not None:
            for ell, (tm, dc) in enumerate(zip(self.router.transforms, self.router.classifiers), 1):
                for k, v in tm.params().items():
                    arrays[f"router.{ell}.tm.{k}"] = v
                for k, v in dc.params().items():
                    arrays[f"router.{ell}.dc.{k}"] = v
            for d, cen in self.router.centers.items():
                arrays[f"center.{d}"] = cen
        for (d, ell), g in self.gmms.items():
            arrays[f"gmm.{d}.{ell}.weights"] = g.weights
            arrays[f"gmm.{d}.{ell}.means"] = g.means
            arrays[f"gmm.{d}.{ell}.covs"] = g.covs
        cfg = asdict(self.config)
        cfg["lora_targets"] = list(cfg["lora_targets"])
        meta = {
            "engine_config": cfg,
            "backbone_config": asdict(self.backbone.config),
            "num_classes": self.num_classes,
            "max_domains": self.max_domains,
            "trained": self.trained,
            "router_trained": self.router_trained,
            "router_domains": self.router.domains if self.router else [],
            "router_layers": list(self.router.layers) if self.router else [],
            "specific_domains": sorted(self.bank.specific),
            "heads": head_kinds,
            "gmms": [list(k) for k in self.gmms],
            "metrics": None if record is None else {"order_id": record.order_id, "order": list(record.order), "rows": record.rows},
            "extra": extra or {},
        }
        write_container(path, CHECKPOINT_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> tuple["Engine", MetricsRecord | None]:
        meta, arrays = read_container(path, CHECKPOINT_MAGIC)
        ecfg = dict(meta["engine_config"])
        known = {f.name for f in fields(EngineConfig)}
        config = EngineConfig(**{k: v for k, v in ecfg.items() if k in known})
        bcfg = BackboneConfig(**meta["backbone_config"])
        backbone = Backbone.from_arrays(bcfg, arrays, "bb.")
        eng = cls(config, backbone, meta["num_classes"], meta["max_domains"])
        for i, blk in enumerate(eng.bank.shared):
            for t, ad in blk.items():
                ad.a = arrays[f"shared.{i}.{t}.a"].copy()
                ad.b = arrays[f"shared.{i}.{t}.b"].copy()
        for d in meta["specific_domains"]:
            blocks = eng.bank.add_domain(d, keyed_rng(0, 0))
            for i, blk in enumerate(blocks):
                for t, ad in blk.items():
                    ad.a = arrays[f"spec.{d}.{i}.{t}.a"].copy()
                    ad.b = arrays[f"spec.{d}.{i}.{t}.b"].copy()
        for d, kind in meta["heads"].items():
            if kind == "LinearHead":
                h = LinearHead(arrays[f"head.{d}.w"].copy(), arrays[f"head.{d}.bias"].copy())
            else:
                h = StochasticHead(arrays[f"head.{d}.mu"].copy(), arrays[f"head.{d}.sigma"].copy(), config.eta,
                                   train_sigma=config.head_type == "stochastic")
            eng.heads[int(d)] = h
        if any(k.startswith("snap.") for k in arrays):
            shared = [{t: ad.copy() for t, ad in blk.items()} for blk in eng.bank.shared]
            for i, blk in enumerate(shared):
                for t, ad in blk.items():
                    ad.a = arrays[f"snap.{i}.{t}.a"].copy()
            eng.snapshot = SharedSnapshot.take(shared)
        if eng.router is not None:
            for ell, (tm, dc) in enumerate(zip(eng.router.transforms, eng.router.classifiers), 1):
                for k in tm.params():
                    setattr(tm, k, arrays[f"router.{ell}.tm.{k}"].copy())
                for k in dc.params():
                    setattr(dc, k, arrays[f"router.{ell}.dc.{k}"].copy())
            eng.router.domains = list(meta["router_domains"])
            eng.router.layers = tuple(meta["router_layers"])
            for d in meta["router_domains"]:
                eng.router.centers[d] = arrays[f"center.{d}"].copy()
        for d, ell in meta["gmms"]:
            eng.gmms[(d, ell)] = GmmModel(arrays[f"gmm.{d}.{ell}.weights"].copy(), arrays[f"gmm.{d}.{ell}.means"].copy(),
                                          arrays[f"gmm.{d}.{ell}.covs"].copy(), ell, d)
        eng.trained = list(meta["trained"])
        eng.router_trained = list(meta["router_trained"])
        eng.extra = meta.get("extra", {})
        rec = None
        if meta["metrics"] is not None:
            m = meta["metrics"]
            rec = MetricsRecord(m["order_id"], tuple(m["order"]), m["rows"])
        return eng, rec


def run_order(domains: list[DomainData], order, config: EngineConfig, backbone: Backbone | None = None,
              order_id: int = 0, num_classes: int | None = None, callback=None) -> tuple[Engine, MetricsRecord]:
    """Train the domains in ``order`` (1-based ids) and evaluate after each one."""
    by_id = {d.domain: d for d in domains}
    order = tuple(int(o) for o in order)
    if sorted(order) != sorted(set(order)) or any(o not in by_id for o in order):
        raise InvalidInputError(f"order {order} is not a set of known domain ids")
    if num_classes is None:
        num_classes = int(max(d.y_train.max() for d in domains)) + 1
    eng = Engine(config, backbone, num_classes, max_domains=max(len(order), 1))
    record = MetricsRecord(order_id, order)
    for b in order:
        info = eng.train_domain(by_id[b])
        eng.train_router_step(by_id[b])
        rows = eng.evaluate([by_id[d] for d in eng.trained], order_id)
        record.rows.extend(rows)
        log.info("order %d after domain %d: mean acc %.4f", order_id, b, np.mean([r["accuracy"] for r in rows]))
        if callback is not None:
            callback(eng, info, rows)
    return eng, record


def forgetting(record: MetricsRecord, domain: int, key: str = "accuracy") -> float:
    """Accuracy on ``domain`` right after training it minus the final accuracy on it."""
    steps = record.steps()
    return record.accuracy(domain, domain, key) - record.accuracy(steps[-1], domain, key)



def run_router_only(domains: list[DomainData], order, config: EngineConfig,
                    backbone: Backbone | None = None) -> tuple[Engine, list[float]]:
    """Train only the domain router along ``order``; DC accuracy per domain at the end.

    The router never sees adapters and draws from its own streams, so this
    yields the same router as a full ``run_order`` with the same config.
    """
    if config.method == "finetune":
        raise ConfigError("fine-tuning has no domain router")
    by_id = {d.domain: d for d in domains}
    order = tuple(int(o) for o in order)
    num_classes = int(max(d.y_train.max() for d in domains)) + 1
    eng = Engine(config, backbone, num_classes, max_domains=len(order))
    for b in order:
        eng.trained.append(b)
        eng.train_router_step(by_id[b])
    accs = []
    for b in order:
        doms, _ = eng.route(by_id[b].x_test)
        accs.append(float(np.mean(doms == b)))
    return eng, accs


def check_invariants(record: MetricsRecord, tol: float = 1e-9) -> list[str]:
    """Violations of routed <= oracle accuracy, one message per offending row."""
    bad = []
    for r in record.rows:
        if r["accuracy"] > r["oracle_accuracy"] + tol:
            bad.append(f"order {r['order_id']} after {r['after_domain']} on {r['eval_domain']}: "
                       f"routed {r['accuracy']!r} > oracle {r['oracle_accuracy']!r}")
    return bad
