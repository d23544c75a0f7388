"""Gaussian mixtures for replaying embeddings of past domains.

EM runs in its MAP form with a fixed ridge prior on every covariance, which
keeps near-degenerate layers factorizable while preserving the monotone
ascent of the (penalised) objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from conec.errors import InvalidInputError, InvalidShapeError
from conec.numkit import Rng, cholesky

DEFAULT_COMPONENTS = 2
COV_JITTER = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


def gaussian_logpdf(z, mean, cov, chol: np.ndarray | None = None, label: str = "") -> np.ndarray | float:
    """Log N(z | mean, cov) via a Cholesky factor; ``z`` may be (d,) or (N, d)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    mean = np.asarray(mean, dtype=np.float64)
    if zb.shape[1] != mean.shape[0]:
        raise InvalidShapeError(f"point width {zb.shape[1]} != mean width {mean.shape[0]}")
    low = cholesky(cov, label) if chol is None else chol
    sol = solve_triangular(low, (zb - mean).T, lower=True)
    maha = (sol * sol).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(low)).sum()
    out = -0.5 * (mean.shape[0] * _LOG_2PI + logdet + maha)
    return float(out[0]) if single else out


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    layer: int = 0
    domain: int = 0
    history: list[float] = field(default_factory=list, repr=False)
    loglik_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        w = self.weights
        if w.ndim != 1 or np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("mixture weights must lie on the simplex")
        self._chol = None

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def chol(self) -> list[np.ndarray]:
        if self._chol is None:
            tag = f"layer {self.layer}, domain {self.domain}"
            self._chol = [cholesky(k, f"{tag}, component {c}") for c, k in enumerate(self.covs)]
        return self._chol

    def component_logpdf(self, z) -> np.ndarray:
        zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
        chol = self.chol()
        return np.stack([gaussian_logpdf(zb, self.means[c], None, chol[c]) for c in range(self.num_components)], axis=1)

    def logpdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        out = logsumexp(self.component_logpdf(z) + lw, axis=1)
        return float(out[0]) if z.ndim == 1 else out

    def loglik(self, samples) -> float:
        return float(np.sum(self.logpdf(samples)))


def _kmeanspp(x, c, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, c):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def fit_em(samples, num_components: int = DEFAULT_COMPONENTS, rng: Rng | None = None, max_iter: int = 100,
           tol: float = 1e-6, layer: int = 0, domain: int = 0) -> GmmModel:
    """Fit a full-covariance mixture by EM with k-means++ seeding.

    Every M-step adds ``ridge / N_c`` to the diagonal of component ``c``, where
    ``ridge = COV_JITTER * N * trace(global_cov) / d``; for one component this
    is exactly ``COV_JITTER * trace(global_cov) / d``. ``model.history`` holds
    the objective (log-likelihood minus the ridge prior term), which EM never
    decreases; ``model.loglik_history`` holds the plain log-likelihood.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidShapeError("samples must be (N, d)")
    n, d = x.shape
    c = int(num_components)
    if d < 1 or c < 1 or n < c:
        raise InvalidInputError(f"need N >= C >= 1 and d >= 1, got N={n}, C={c}, d={d}")
    if rng is None:
        rng = np.random.default_rng(0)
    gmean = x.mean(axis=0)
    gcov = (x - gmean).T @ (x - gmean) / n
    eps = COV_JITTER * max(np.trace(gcov), 1e-12) / d
    ridge = eps * n

    if c == 1:
        resp = np.ones((n, 1))
    else:
        # hard nearest-seed start; a soft start under the global covariance can stall near the mean
        means = _kmeanspp(x, c, rng)
        nearest = ((x[:, None, :] - means[None]) ** 2).sum(axis=2).argmin(axis=1)
        resp = np.eye(c)[nearest]

    history: list[float] = []
    raw: list[float] = []
    model = None
    for _ in range(max_iter):
        model = _m_step(x, resp, ridge, gcov, rng, layer, domain)
        resp, ll = _e_step(model, x)
        obj = ll - 0.5 * ridge * sum(np.trace(np.linalg.inv(k)) for k in model.covs)
        history.append(obj)
        raw.append(ll)
        if len(history) > 1 and history[-1] - history[-2] <= tol * abs(history[-2]):
            break
        if c == 1:
            break
    model.history = history
    model.loglik_history = raw
    return model


def _e_step(model: GmmModel, x):
    with np.errstate(divide="ignore"):
        lw = np.log(model.weights)
    lp = model.component_logpdf(x) + lw
    norm = logsumexp(lp, axis=1)
    return np.exp(lp - norm[:, None]), float(norm.sum())


def _m_step(x, resp, ridge, gcov, rng, layer, domain):
    n, d = x.shape
    nk = resp.sum(axis=0)
    empty = nk < 1e-10 * n
    safe = np.where(empty, 1.0, nk)
    means = (resp.T @ x) / safe[:, None]
    covs = np.empty((len(nk), d, d))
    weights = nk / n
    for k in range(len(nk)):
        if empty[k]:
            # dead component: restart at a random sample with the global covariance
            means[k] = x[rng.integers(n)]
            covs[k] = gcov + (ridge / n) * np.eye(d)
            weights[k] = 1.0 / n
            continue
        xc = x - means[k]
        covs[k] = (resp[:, k, None] * xc).T @ xc / nk[k] + (ridge / nk[k]) * np.eye(d)
        covs[k] = 0.5 * (covs[k] + covs[k].T)
    weights = weights / weights.sum()
    return GmmModel(weights, means, covs, layer, domain)


def sample(model: GmmModel, n: int, rng: Rng) -> np.ndarray:
    """Draw a component from the weights, then mean + L @ eps."""
    comp = rng.choice(model.num_components, size=n, p=model.weights)
    eps = rng.standard_normal((n, model.dim))
    out = np.empty((n, model.dim))
    chol = model.chol()
    for k in range(model.num_components):
        idx = comp == k
        out[idx] = model.means[k] + eps[idx] @ chol[k].T
    return out


def export_csv(models: list[GmmModel], path) -> None:
    """One row per component: domain, layer, component, weight, mean..., diag(cov)..."""
    if not models:
        raise InvalidInputError("no mixtures to export")
    d = models[0].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "layer", "component", "weight"] + [f"mean_{i}" for i in range(d)] + [f"var_{i}" for i in range(d)])
        for m in models:
            for k in range(m.num_components):
                w.writerow([m.domain, m.layer, k, repr(float(m.weights[k]))]
                           + [repr(float(v)) for v in m.means[k]] + [repr(float(v)) for v in np.diag(m.covs[k])])
