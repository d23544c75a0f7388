"""Training objectives with analytic gradients.

Batched inputs are averaged over the batch, except ``ball_loss`` which sums
over every (sample, other centre) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conec.errors import InvalidInputError, InvalidShapeError
from conec.numkit import log_softmax, softmax

DEFAULT_LAMBDA_KD = 5.0
DEFAULT_LAMBDA_BALL = 2.0
DEFAULT_KD_TEMPERATURE = 2.0


def cross_entropy(logits, labels):
    """Mean ``-log softmax(logits)[label]`` and its gradient w.r.t. the logits."""
    x = np.asarray(logits, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (xb.shape[0],):
        raise InvalidShapeError(f"{y.shape[0]} labels for {xb.shape[0]} rows of logits")
    if np.any(y < 0) or np.any(y >= xb.shape[1]):
        raise InvalidInputError(f"label out of range [0, {xb.shape[1]})")
    n = xb.shape[0]
    logp = log_softmax(xb)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def kd_loss(student_logits, teacher_logits, tau: float = DEFAULT_KD_TEMPERATURE):
    """Soft cross-entropy ``-sum p_teacher log p_student`` at temperature ``tau``.

    The teacher is a constant; only the student receives a gradient.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise InvalidShapeError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    if not tau > 0:
        raise InvalidInputError("temperature must be positive")
    single = s.ndim == 1
    sb = s[None] if single else s
    tb = t[None] if single else t
    n = sb.shape[0]
    pt = softmax(tb, tau)
    logps = log_softmax(sb, tau)
    loss = -(pt * logps).sum() / n
    grad = (np.exp(logps) - pt) / (tau * n)
    return float(loss), (grad[0] if single else grad)


def ball_loss(embeddings, domains, centers, margin: float = 1.0):
    """Hinge ``max(0, d(z, c_own) + margin - d(z, c_other))`` summed over pairs.

    ``domains`` index rows of ``centers``; distances are Euclidean. With fewer
    than two centres there are no negative pairs and the loss is zero.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    y = np.asarray(domains, dtype=np.int64)
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != c.shape[1] or y.shape != (z.shape[0],):
        raise InvalidShapeError("ball_loss needs (N, d) embeddings, N labels and (D, d) centres")
    if margin < 0:
        raise InvalidInputError("margin must be non-negative")
    grad = np.zeros_like(z)
    if c.shape[0] < 2 or z.shape[0] == 0:
        return 0.0, grad
    if np.any(y < 0) or np.any(y >= c.shape[0]):
        raise InvalidInputError("domain label without a centre")
    diff = z[:, None, :] - c[None, :, :]  # (N, D, d)
    dist = np.linalg.norm(diff, axis=2)
    own = dist[np.arange(len(y)), y]
    hinge = own[:, None] + margin - dist
    other = np.ones_like(dist, dtype=bool)
    other[np.arange(len(y)), y] = False
    active = (hinge > 0) & other
    loss = float(hinge[active].sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    n_active = active.sum(axis=1)
    grad += n_active[:, None] * unit[np.arange(len(y)), y]
    grad -= (active[..., None] * unit).sum(axis=1)
    return loss, grad


@dataclass
class LossReport:
    total: float
    ce: float
    kd: float = 0.0
    ball: float = 0.0


def _check_lambda(lam):
    if lam < 0:
        raise InvalidInputError(f"loss weight must be non-negative, got {lam}")


def joint_dil_loss(ce: float, kd: float, lambda_kd: float = DEFAULT_LAMBDA_KD) -> LossReport:
    _check_lambda(lambda_kd)
    return LossReport(total=ce + lambda_kd * kd, ce=ce, kd=kd)


def joint_aux_loss(ce: float, ball: float, lambda_ball: float = DEFAULT_LAMBDA_BALL) -> LossReport:
    _check_lambda(lambda_ball)
    return LossReport(total=ce + lambda_ball * ball, ce=ce, ball=ball)
