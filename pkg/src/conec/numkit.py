"""Dense linear algebra, seeded random streams and a finite-difference oracle.

Everything works on float64 numpy arrays. Random draws always go through an
explicit ``numpy.random.Generator``; nothing here touches global RNG state.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from conec.errors import InvalidInputError, InvalidShapeError, NumericError

Rng = np.random.Generator

SVD_MAX_SWEEPS = 100
JITTER_START = 1e-9
JITTER_MAX = 1e-3


def make_rng(seed: int) -> Rng:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_rngs(seed: int, n: int) -> list[Rng]:
    """Independent streams derived from one seed, one per consumer."""
    seqs = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def keyed_rng(seed: int, *keys: int) -> Rng:
    """Stream addressed by (seed, keys...); independent of call order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _complete_columns(q: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` flagged invalid with an orthonormal completion."""
    q = q.copy()
    n_rows = q.shape[0]
    basis = [q[:, j] for j in np.flatnonzero(valid)]
    candidates = iter(np.eye(n_rows))
    for j in np.flatnonzero(~valid):
        while True:
            v = next(candidates).copy()
            for b in basis:
                v -= (b @ v) * b
            for b in basis:  # second pass for numerical orthogonality
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        v /= nv
        q[:, j] = v
        basis.append(v)
    return q


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(u, s, v)`` with ``m == u @ diag(s) @ v.T``; ``u`` is rows x k,
    ``v`` is cols x k, k = min(rows, cols), ``s`` nonincreasing.
    """
    a = as_matrix(m, "svd input")
    if min(a.shape) < 1:
        raise InvalidShapeError("svd needs at least one row and one column")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    n_rows, n = a.shape
    # unit max-abs scaling keeps the squared norms below clear of under/overflow
    scale = float(np.abs(a).max())
    if scale == 0.0 or not np.isfinite(scale):
        scale = 1.0
    a = a / scale
    w = a.copy()
    v = np.eye(n)
    tol = np.finfo(np.float64).eps * n_rows
    # columns this small are numerically zero; their angles are rounding noise
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2

    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if alpha <= negligible or beta <= negligible or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi_old = wi.copy()
                w[:, i] = c * wi_old - s * wj
                w[:, j] = s * wi_old + c * wj
                vi_old = v[:, i].copy()
                v[:, i] = c * vi_old - s * v[:, j]
                v[:, j] = s * vi_old + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")

    sing = np.linalg.norm(w, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    w = w[:, order]
    v = v[:, order]
    cutoff = (sing[0] if sing.size else 0.0) * np.finfo(np.float64).eps * max(a.shape)
    valid = sing > cutoff
    u = np.zeros_like(w)
    u[:, valid] = w[:, valid] / sing[valid]
    if not np.all(valid):
        u = _complete_columns(u, valid)
        sing = np.where(valid, sing, 0.0)
    sing = sing * scale
    if transposed:
        return v, sing, u
    return u, sing, v


def random_orthogonal_rows(r: int, k: int, rng: Rng) -> np.ndarray:
    """r x k matrix with orthonormal rows: SVD of a Gaussian M, then U V^T."""
    if r < 1 or k < 1:
        raise InvalidShapeError(f"need r, k >= 1, got r={r}, k={k}")
    if r > k:
        raise InvalidShapeError(f"cannot build {r} orthonormal rows in dimension {k}")
    m = rng.standard_normal((r, k))
    u, _, v = svd(m)
    return u @ v.T


def cholesky(k, label: str = "") -> np.ndarray:
    """Lower Cholesky factor, adding growing diagonal jitter if ``k`` is not PD.

    Jitter starts at 1e-9 and is multiplied by 10 up to 1e-3 (scaled by the
    mean diagonal) before giving up.
    """
    a = as_matrix(k, "covariance")
    if a.shape[0] != a.shape[1]:
        raise InvalidShapeError(f"cholesky needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    scale = max(float(np.mean(np.diag(a))), 1e-300) if a.size else 1.0
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    eps = JITTER_START
    eye = np.eye(a.shape[0])
    while eps <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + eps * scale * eye)
        except np.linalg.LinAlgError:
            eps *= 10.0
    where = f" ({label})" if label else ""
    raise NumericError(f"matrix is not positive definite even with jitter {JITTER_MAX}{where}")


def softmax(v, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    x = np.asarray(v, dtype=np.float64) / temperature
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    x = np.asarray(v, dtype=np.float64) / temperature
    x = x - np.max(x, axis=axis, keepdims=True)
    return x - np.log(np.sum(np.exp(x), axis=axis, keepdims=True))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    if not h > 0:
        raise InvalidInputError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
