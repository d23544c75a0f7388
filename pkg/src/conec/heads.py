"""Classifier heads: stochastic cosine, plain cosine, linear; prototypes.

Heads work on batches of embeddings (N, d). ``forward`` returns the logits
and a cache; ``backward`` turns d(loss)/d(logits) into parameter gradients
plus d(loss)/d(embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conec.errors import InvalidInputError, InvalidShapeError
from conec.numkit import Rng

DEFAULT_ETA = 16.0


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    norms = np.linalg.norm(zb, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("embedding with zero norm has no cosine similarity")
    return zb, norms, single


def _cosine_logits(w, zb, znorm, eta):
    wnorm = np.linalg.norm(w, axis=1)
    if np.any(wnorm == 0):
        raise InvalidInputError("class weight vector with zero norm")
    cos = (zb @ w.T) / (znorm[:, None] * wnorm[None, :])
    return eta * cos, cos, wnorm


def _cosine_backward(dlogits, w, zb, znorm, wnorm, cos, eta):
    """Gradients of eta*cos(w_m, z_n) w.r.t. the weights and embeddings."""
    g = eta * dlogits
    gw = (g.T @ (zb / znorm[:, None])) / wnorm[:, None] - (g * cos).sum(axis=0)[:, None] * w / (wnorm**2)[:, None]
    gz = (g @ (w / wnorm[:, None])) / znorm[:, None] - (g * cos).sum(axis=1)[:, None] * zb / (znorm**2)[:, None]
    return gw, gz


@dataclass
class StochasticHead:
    """Cosine classifier whose class weights are ``mu + eps * sigma``.

    ``sigma`` is clamped to be non-negative after every optimiser step.
    A head with ``train_sigma=False`` and zero ``sigma`` is the plain cosine
    classifier.
    """

    mu: np.ndarray
    sigma: np.ndarray
    eta: float = DEFAULT_ETA
    train_sigma: bool = True

    @classmethod
    def create(cls, num_classes: int, dim: int, rng: Rng, eta=DEFAULT_ETA, sigma_init=0.1, stochastic=True):
        mu = rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
        sigma = np.full((num_classes, dim), sigma_init if stochastic else 0.0)
        return cls(mu, sigma, float(eta), train_sigma=stochastic)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu, "sigma": self.sigma} if self.train_sigma else {"mu": self.mu}

    def forward(self, z, rng: Rng | None = None):
        """Logits; with ``rng`` the class weights are sampled, otherwise ``mu`` is used."""
        zb, znorm, single = _as_batch(z)
        if zb.shape[1] != self.mu.shape[1]:
            raise InvalidShapeError(f"embedding width {zb.shape[1]} != head width {self.mu.shape[1]}")
        eps = None
        w = self.mu
        if rng is not None:
            eps = rng.standard_normal(self.mu.shape)
            w = self.mu + eps * self.sigma
        logits, cos, wnorm = _cosine_logits(w, zb, znorm, self.eta)
        cache = (w, eps, zb, znorm, wnorm, cos, single)
        return (logits[0] if single else logits), cache

    def forward_train(self, z, rng: Rng) -> np.ndarray:
        return self.forward(z, rng)[0]

    def forward_infer(self, z) -> np.ndarray:
        return self.forward(z, None)[0]

    def backward(self, cache, dlogits):
        w, eps, zb, znorm, wnorm, cos, single = cache
        dl = np.atleast_2d(dlogits)
        gw, gz = _cosine_backward(dl, w, zb, znorm, wnorm, cos, self.eta)
        grads = {"mu": gw}
        if self.train_sigma:
            grads["sigma"] = gw * eps if eps is not None else np.zeros_like(self.sigma)
        return grads, (gz[0] if single else gz)

    def post_step(self):
        np.maximum(self.sigma, 0.0, out=self.sigma)

    def copy(self) -> "StochasticHead":
        return StochasticHead(self.mu.copy(), self.sigma.copy(), self.eta, self.train_sigma)


@dataclass
class LinearHead:
    """Affine classifier ``z @ w.T + bias`` used in the classifier ablation."""

    w: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, num_classes: int, dim: int, rng: Rng):
        return cls(rng.standard_normal((num_classes, dim)) / np.sqrt(dim), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    def params(self):
        return {"w": self.w, "bias": self.bias}

    def forward(self, z, rng: Rng | None = None):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None] if single else z
        logits = zb @ self.w.T + self.bias
        return (logits[0] if single else logits), (zb, single)

    def forward_train(self, z, rng: Rng | None = None):
        return self.forward(z)[0]

    def forward_infer(self, z):
        return self.forward(z)[0]

    def backward(self, cache, dlogits):
        zb, single = cache
        dl = np.atleast_2d(dlogits)
        grads = {"w": dl.T @ zb, "bias": dl.sum(axis=0)}
        gz = dl @ self.w
        return grads, (gz[0] if single else gz)

    def post_step(self):
        pass

    def copy(self) -> "LinearHead":
        return LinearHead(self.w.copy(), self.bias.copy())


@dataclass
class PrototypeSet:
    means: np.ndarray
    counts: np.ndarray


def compute_prototypes(embeddings, labels, num_classes: int) -> PrototypeSet:
    """Per-class mean embedding. Every class must be present."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise InvalidShapeError("embeddings must be (N, d) with N labels")
    counts = np.bincount(y, minlength=num_classes)[:num_classes]
    missing = [int(c) for c in np.flatnonzero(counts == 0)]
    if missing or y.max(initial=0) >= num_classes or y.min(initial=0) < 0:
        raise InvalidInputError(f"no samples for class(es) {missing}" if missing else "label out of range")
    sums = np.zeros((num_classes, z.shape[1]))
    np.add.at(sums, y, z)
    return PrototypeSet(sums / counts[:, None], counts)


def replace_means(head: StochasticHead, protos: PrototypeSet) -> StochasticHead:
    """Copy of ``head`` whose class means are the prototypes; ``sigma`` kept."""
    if protos.means.shape != head.mu.shape:
        raise InvalidShapeError(f"prototypes {protos.means.shape} do not match head means {head.mu.shape}")
    return StochasticHead(protos.means.copy(), head.sigma.copy(), head.eta, head.train_sigma)
