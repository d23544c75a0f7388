"""Auxiliary domain classification: per-layer transform MLP + linear classifier.

Each backbone layer gets its own (transform, classifier) pair that reads the
CLS row of the adapter-free trace. At inference the earliest layer whose
confidence clears the threshold decides the domain; when none does, the most
confident layer decides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from conec.backbone import LayerTrace, gelu, gelu_grad
from conec.errors import ConfigError, InvalidInputError, NumericError, StateError
from conec.losses import DEFAULT_LAMBDA_BALL, ball_loss, cross_entropy
from conec.numkit import Rng, softmax
from conec.optim import Sgd

DEFAULT_THRESHOLD = 0.9
MAX_SYNTHETIC_PER_DOMAIN = 512


@dataclass
class TransformMlp:
    """Two-layer MLP d -> hidden -> d."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, dim: int, hidden: int, rng: Rng):
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
            np.zeros(dim),
        )

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, z):
        a = z @ self.w1 + self.b1
        return gelu(a) @ self.w2 + self.b2, (z, a)

    def backward(self, cache, dout):
        z, a = cache
        g = gelu(a)
        dg = dout @ self.w2.T
        da = dg * gelu_grad(a)
        grads = {"w1": z.T @ da, "b1": da.sum(axis=0), "w2": g.T @ dout, "b2": dout.sum(axis=0)}
        return grads, da @ self.w1.T


@dataclass
class DomainClassifier:
    """Linear map to ``max_domains`` logits; only the first ``active`` are used."""

    w: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, dim: int, max_domains: int, rng: Rng):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, max_domains)), np.zeros(max_domains))

    def params(self):
        return {"w": self.w, "bias": self.bias}

    def logits(self, z, active: int) -> np.ndarray:
        out = z @ self.w + self.bias
        out[:, active:] = -np.inf
        return out


@dataclass
class DomainRouterState:
    transforms: list[TransformMlp]
    classifiers: list[DomainClassifier]
    threshold: float = DEFAULT_THRESHOLD
    domains: list[int] = field(default_factory=list)  # class index -> domain id
    centers: dict[int, np.ndarray] = field(default_factory=dict)  # domain -> (L, d)
    layers: tuple[int, ...] = ()  # participating layers (1-based); empty = all

    @classmethod
    def create(cls, num_layers: int, dim: int, max_domains: int, rng: Rng, hidden: int | None = None,
               threshold: float = DEFAULT_THRESHOLD, layers=()):
        hidden = hidden or min(1024, 4 * dim)
        tms, dcs = [], []
        for _ in range(num_layers):
            tms.append(TransformMlp.create(dim, hidden, rng))
            dcs.append(DomainClassifier.create(dim, max_domains, rng))
        if not threshold >= 0:
            raise ConfigError("threshold must be non-negative")
        return cls(tms, dcs, float(threshold), [], {}, tuple(layers))

    @property
    def num_layers(self) -> int:
        return len(self.transforms)

    @property
    def active_layers(self) -> list[int]:
        return list(self.layers) if self.layers else list(range(1, self.num_layers + 1))

    def probs(self, z_cls: np.ndarray, layer: int) -> np.ndarray:
        if not self.domains:
            raise StateError("domain router has not been trained on any domain")
        z = np.atleast_2d(z_cls)
        tz, _ = self.transforms[layer - 1].forward(z)
        logits = self.classifiers[layer - 1].logits(tz, len(self.domains))
        p = np.zeros_like(logits)
        p[:, : len(self.domains)] = softmax(logits[:, : len(self.domains)])
        return p


def layer_confidence(router: DomainRouterState, trace: LayerTrace, layer: int):
    """(predicted domain ids, confidence) of one layer's classifier."""
    if not 1 <= layer <= router.num_layers:
        raise InvalidInputError(f"layer {layer} outside [1, {router.num_layers}]")
    cls = trace.cls_at(layer)
    p = router.probs(cls, layer)
    idx = p.argmax(axis=1)
    dom = np.asarray(router.domains)[idx]
    conf = p.max(axis=1)
    if np.ndim(cls) == 1:
        return int(dom[0]), float(conf[0])
    return dom, conf


def route(router: DomainRouterState, trace: LayerTrace):
    """Predicted domain ids and 1-based exit layers for every sample in ``trace``."""
    layers = router.active_layers
    single = np.ndim(trace.cls_at(1)) == 1
    preds, confs = [], []
    for ell in layers:
        p = router.probs(trace.cls_at(ell), ell)
        preds.append(p.argmax(axis=1))
        confs.append(p.max(axis=1))
    preds = np.stack(preds, axis=1)
    confs = np.stack(confs, axis=1)
    passing = confs >= router.threshold
    first = passing.argmax(axis=1)
    best = confs.argmax(axis=1)
    pick = np.where(passing.any(axis=1), first, best)
    rows = np.arange(preds.shape[0])
    dom = np.asarray(router.domains)[preds[rows, pick]]
    exit_layer = np.asarray(layers)[pick]
    if single:
        return int(dom[0]), int(exit_layer[0])
    return dom, exit_layer


def synthetic_count(real_count: int, num_past: int) -> int:
    if num_past == 0:
        return 0
    return min(MAX_SYNTHETIC_PER_DOMAIN, max(1, real_count // num_past))


class _Cycler:
    """Draws without replacement, reshuffling when a pool is exhausted."""

    def __init__(self, n: int, rng: Rng):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + m])
            self.pos += m
            k -= m
        return np.concatenate(out)


def aux_loss_and_grads(tm: TransformMlp, dc: DomainClassifier, z, labels, centers, active: int,
                       lambda_ball: float, margin: float, use_ball: bool = True):
    """Mean CE + lambda * (ball sum / batch) for one layer, with parameter gradients."""
    tz, cache = tm.forward(z)
    logits = dc.logits(tz, active)[:, :active]
    ce, dlog = cross_entropy(logits, labels)
    dlog_full = np.zeros((z.shape[0], dc.w.shape[1]))
    dlog_full[:, :active] = dlog
    g_dc = {"w": tz.T @ dlog_full, "bias": dlog_full.sum(axis=0)}
    dtz = dlog_full @ dc.w.T
    ball = 0.0
    if use_ball and centers is not None and active > 1 and lambda_ball > 0:
        ball, gball = ball_loss(tz, labels, centers, margin)
        ball /= z.shape[0]
        dtz = dtz + lambda_ball * gball / z.shape[0]
    g_tm, _ = tm.backward(cache, dtz)
    return ce, ball, g_tm, g_dc


def train_router(router: DomainRouterState, real: list[np.ndarray], domain: int,
                 synthetic: dict[int, list[np.ndarray]], rng: Rng, epochs: int = 20,
                 lambda_ball: float = DEFAULT_LAMBDA_BALL, margin: float = 1.0, lr_tm: float = 1e-4,
                 lr_dc: float = 2e-3, batch_size: int = 64, momentum: float = 0.9, use_ball: bool = True):
    """Train every participating layer on real current-domain CLS rows plus replayed ones.

    ``real[l - 1]`` holds layer ``l`` CLS embeddings of the current domain;
    ``synthetic[d][l - 1]`` the replayed ones of past domain ``d``. Layers are
    trained independently, each with its own random stream. Returns a list of
    per-layer (final CE, final ball) values.
    """
    if domain in router.domains:
        raise StateError(f"router already trained on domain {domain}")
    past = list(router.domains)
    missing = [d for d in past if d not in synthetic]
    if missing:
        raise ConfigError(f"no replay embeddings for past domain(s) {missing}")
    if len(past) + 1 > router.classifiers[0].w.shape[1]:
        raise ConfigError("more domains than the router was sized for")
    router.domains.append(domain)
    order = router.domains
    active = len(order)
    layer_rngs = rng.spawn(router.num_layers)
    report = []
    for ell in router.active_layers:
        lrng = layer_rngs[ell - 1]
        pools = [synthetic[d][ell - 1] for d in past] + [real[ell - 1]]
        centers = None
        if all(d in router.centers for d in order):
            centers = np.stack([router.centers[d][ell - 1] for d in order])
        tm, dc = router.transforms[ell - 1], router.classifiers[ell - 1]
        opt_tm = Sgd(tm.params(), lr_tm, momentum)
        opt_dc = Sgd(dc.params(), lr_dc, momentum)
        cyclers = [_Cycler(len(p), lrng) for p in pools]
        total = sum(len(p) for p in pools)
        per_dom = max(1, batch_size // active)
        steps = max(1, math.ceil(total / batch_size))
        ce = ball = 0.0
        for _ in range(epochs if active > 1 else 0):
            for _ in range(steps):
                zs, ys = [], []
                for k, (pool, cyc) in enumerate(zip(pools, cyclers)):
                    idx = cyc.take(per_dom)
                    zs.append(pool[idx])
                    ys.append(np.full(len(idx), k))
                z = np.concatenate(zs)
                y = np.concatenate(ys)
                ce, ball, g_tm, g_dc = aux_loss_and_grads(tm, dc, z, y, centers, active, lambda_ball, margin, use_ball)
                if not np.isfinite(ce + ball):
                    raise NumericError(f"non-finite router loss at layer {ell}")
                opt_tm.step(g_tm)
                opt_dc.step(g_dc)
        report.append((ce, ball))
    return report
