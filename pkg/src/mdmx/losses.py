"""Loss terms for the semi-supervised objective, each returning its gradient with respect to logits.

Every batch loss is averaged over rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrastive import ntxent_loss
from .mixematch import MixedBatch, softmax


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 25.0
    rampup_epochs: int = 16
    lambda_c: float = 0.025
    sce_alpha: float = 0.1
    sce_beta: float = 1.0
    log_clip: float = -4.0

    def __post_init__(self):
        vals = (self.lambda_u, self.lambda_c, self.sce_alpha, self.sce_beta, self.log_clip)
        if not all(np.isfinite(vals)):
            raise ValueError("loss weights must be finite")
        if self.lambda_u < 0 or self.lambda_c < 0 or self.sce_beta < 0 or self.sce_alpha <= 0:
            raise ValueError("lambda_u, lambda_c, sce_beta must be >= 0 and sce_alpha > 0")
        if self.rampup_epochs < 0:
            raise ValueError("rampup_epochs must be >= 0")
        if self.log_clip >= 0:
            raise ValueError("log_clip must be negative")

    def lambda_u_at(self, epoch: float) -> float:
        if self.rampup_epochs == 0:
            return self.lambda_u
        return self.lambda_u * min(1.0, epoch / self.rampup_epochs)


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def sce_loss(logits, targets, alpha: float = 0.1, beta: float = 1.0, log_clip: float = -4.0):
    """Symmetric cross-entropy ``alpha * CE(t, p) + beta * RCE(t, p)``.

    ``RCE = -sum_c p_c * max(log t_c, log_clip)``. Returns the row-mean loss
    and its gradient with respect to ``logits``.
    """
    z, t = _rows(logits), _rows(targets)
    b = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    log_p = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    ce = -np.sum(np.where(t > 0, t * log_p, 0.0), axis=1)
    with np.errstate(divide="ignore"):
        log_t = np.maximum(np.log(t), log_clip)
    rce = -np.sum(p * log_t, axis=1)
    loss = float(np.mean(alpha * ce + beta * rce))
    g_ce = p * t.sum(axis=1, keepdims=True) - t
    g_rce = -p * (log_t - np.sum(p * log_t, axis=1, keepdims=True))
    return loss, (alpha * g_ce + beta * g_rce) / b


def ce_loss(logits, targets):
    """Plain cross-entropy (SCE with ``alpha=1, beta=0``)."""
    return sce_loss(logits, targets, alpha=1.0, beta=0.0)


def mse_prob_loss(logits, targets):
    """Row-mean of ``|softmax(logits) - t|^2 / C``."""
    z, t = _rows(logits), _rows(targets)
    b, c = z.shape
    p = softmax(z)
    diff = p - t
    loss = float(np.mean(np.sum(diff * diff, axis=1) / c))
    g_p = 2.0 * diff / (c * b)
    g_z = p * (g_p - np.sum(p * g_p, axis=1, keepdims=True))
    return loss, g_z


@dataclass
class SemiLossResult:
    total: float
    l_sup: float
    l_unsup: float
    l_self: float
    lambda_u: float
    grad_x_in: np.ndarray
    grad_x_emb: np.ndarray
    grad_u_in: np.ndarray
    grad_u_emb: np.ndarray
    grad_proj: np.ndarray


def semi_loss(
    logits: dict[str, np.ndarray],
    mixed: MixedBatch,
    projections: np.ndarray,
    weights: LossWeights,
    epoch: float,
    tau: float = 0.5,
) -> SemiLossResult:
    """``L_sup + lambda_u(epoch) * L_unsup + lambda_c * L_self``.

    ``logits`` holds classifier outputs for the four mixed sets under keys
    ``x_in``, ``x_emb``, ``u_in``, ``u_emb``. ``projections`` are the
    interleaved strong-view projections of every sample in the batch.
    """
    sce_kw = dict(alpha=weights.sce_alpha, beta=weights.sce_beta, log_clip=weights.log_clip)
    s_in, g_x_in = sce_loss(logits["x_in"], mixed.x_targets, **sce_kw)
    s_emb, g_x_emb = sce_loss(logits["x_emb"], mixed.x_targets, **sce_kw)
    l_sup = s_in + s_emb

    if mixed.u_inputs.shape[0]:
        m_in, g_u_in = mse_prob_loss(logits["u_in"], mixed.u_targets)
        m_emb, g_u_emb = mse_prob_loss(logits["u_emb"], mixed.u_targets)
        l_unsup = m_in + m_emb
    else:
        l_unsup = 0.0
        g_u_in = np.zeros_like(logits["u_in"])
        g_u_emb = np.zeros_like(logits["u_emb"])

    l_self, g_proj = ntxent_loss(projections, tau)
    lam_u = weights.lambda_u_at(epoch)
    total = l_sup + lam_u * l_unsup + weights.lambda_c * l_self
    return SemiLossResult(
        total, l_sup, l_unsup, l_self, lam_u,
        g_x_in, g_x_emb, lam_u * g_u_in, lam_u * g_u_emb, weights.lambda_c * g_proj,
    )
