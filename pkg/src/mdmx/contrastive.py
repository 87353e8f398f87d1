"""NT-Xent contrastive loss over interleaved view pairs.

Rows ``2m`` and ``2m + 1`` of the projection matrix are the two views of
sample ``m``; every other row in the batch acts as a negative.
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    pass


def pairwise_cosine(Z: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Similarity matrix ``Z @ Z.T`` of unit-norm rows."""
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ContractError(f"row {worst} has norm {norms[worst]!r}, expected unit norm")
    return Z @ Z.T


def positive_index(n_rows: int) -> np.ndarray:
    return np.arange(n_rows) ^ 1


def ntxent_loss(Z: np.ndarray, tau: float = 0.5) -> tuple[float, np.ndarray]:
    """Mean NT-Xent loss over all ``2M`` anchors and its gradient with respect to ``Z``.

    Rows are normalized internally, so the gradient is taken through the
    normalization; for unit rows this is the tangent-space gradient. An
    all-zero row (possible after aggressive dropout) counts as orthogonal to
    every other row and gets a zero gradient.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"need an even number (>= 2) of rows, got {n}")
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    # a zero row has similarity 0 to everything and receives no gradient
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    Zn = Z / safe
    logits = (Zn @ Zn.T) / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = np.max(logits, axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    pos = positive_index(n)
    rows = np.arange(n)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    per_anchor = lse - logits[rows, pos]
    loss = float(per_anchor.mean())

    g_logits = expd / denom
    g_logits[rows, pos] -= 1.0
    g_sim = g_logits / (n * tau)
    g_zn = (g_sim + g_sim.T) @ Zn
    radial = np.sum(Zn * g_zn, axis=1, keepdims=True)
    grad = np.where(live, (g_zn - Zn * radial) / safe, 0.0)
    return loss, grad
