"""Label refinement, label guessing and mixup in input and embedding space.

Labeled and unlabeled items are mixed against a shuffled pool holding both
sets. Each item draws one ``lam' = max(lam, 1 - lam)``, ``lam ~ Beta(alpha, alpha)``,
and uses it for its input, its embedding and its soft target alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Model, ShapeError, classify, encode


@dataclass(frozen=True)
class MixParams:
    T: float = 0.5
    alpha: float = 4.0

    def __post_init__(self):
        if self.T <= 0 or self.alpha <= 0:
            raise ValueError("T and alpha must be positive")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sharpen(p: np.ndarray, T: float) -> np.ndarray:
    """``p ** (1/T)`` renormalised, computed in log space. ``T == 1`` returns ``p`` unchanged."""
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    p = np.asarray(p, dtype=np.float64)
    if T == 1.0:
        return p.copy()
    with np.errstate(divide="ignore"):
        logp = np.log(p) / T
    return softmax(logp)


def guess_labels(model: Model, weak1: np.ndarray, weak2: np.ndarray, T: float) -> np.ndarray:
    """Sharpened mean prediction over two weak views. No gradients are recorded."""
    p1 = softmax(classify(model, encode(model, weak1)))
    p2 = softmax(classify(model, encode(model, weak2)))
    return sharpen(0.5 * (p1 + p2), T)


def refine_labels(y_onehot: np.ndarray, w, weak_probs) -> np.ndarray:
    """``w * y + (1 - w) * mean(weak predictions)``, row-wise."""
    y = np.asarray(y_onehot, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("clean probabilities must lie in [0, 1]")
    preds = np.mean(np.stack([np.asarray(q, dtype=np.float64) for q in weak_probs]), axis=0)
    w = w[..., None] if w.ndim == y.ndim - 1 else w
    return w * y + (1.0 - w) * preds


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    lam = rng.beta(alpha, alpha, size=size)
    return np.maximum(lam, 1.0 - lam)


def mix(a1, a2, p1, p2, lam):
    """Convex combination of items and of their targets with weight ``lam`` on the first."""
    a1, a2 = np.asarray(a1, dtype=np.float64), np.asarray(a2, dtype=np.float64)
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    if a1.shape != a2.shape or p1.shape != p2.shape:
        raise ShapeError(f"cannot mix shapes {a1.shape}/{a2.shape} with targets {p1.shape}/{p2.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    la = lam[..., None] if lam.ndim == 1 and a1.ndim == 2 else lam
    lp = lam[..., None] if lam.ndim == 1 and p1.ndim == 2 else lam
    return la * a1 + (1.0 - la) * a2, lp * p1 + (1.0 - lp) * p2


@dataclass
class MixedBatch:
    x_inputs: np.ndarray
    x_embeddings: np.ndarray
    x_targets: np.ndarray
    u_inputs: np.ndarray
    u_embeddings: np.ndarray
    u_targets: np.ndarray
    lam: np.ndarray  # per item, labeled items first
    partner: np.ndarray  # pool index each item was mixed with

    @property
    def n_labeled(self) -> int:
        return self.x_inputs.shape[0]

    def embedding_backward(self, g_x_emb: np.ndarray, g_u_emb: np.ndarray) -> np.ndarray:
        """Gradient with respect to the unmixed pool embeddings ``[H_x; H_u]``."""
        g = np.concatenate([g_x_emb, g_u_emb], axis=0)
        lam = self.lam[:, None]
        out = lam * g
        np.add.at(out, self.partner, (1.0 - lam) * g)
        return out


def mixematch(
    x_strong: np.ndarray,
    u_strong: np.ndarray,
    h_x: np.ndarray,
    h_u: np.ndarray,
    targets_x: np.ndarray,
    targets_u: np.ndarray,
    params: MixParams,
    rng: np.random.Generator,
    force_lambda: float | None = None,
) -> MixedBatch:
    """Mix strongly augmented labeled/unlabeled items with partners from the joint pool.

    Rows of the ``*_strong`` / ``h_*`` / ``targets_*`` arrays are items (both
    strong views of a sample appear as separate items). With no unlabeled
    items the pool is the labeled set alone.
    """
    n_x, n_u = x_strong.shape[0], u_strong.shape[0]
    if h_x.shape[0] != n_x or targets_x.shape[0] != n_x or h_u.shape[0] != n_u or targets_u.shape[0] != n_u:
        raise ShapeError("items, embeddings and targets must have matching row counts")
    inputs = np.concatenate([x_strong, u_strong], axis=0)
    embeds = np.concatenate([h_x, h_u], axis=0)
    targets = np.concatenate([targets_x, targets_u], axis=0)
    n = n_x + n_u
    partner = rng.permutation(n)
    if force_lambda is None:
        lam = sample_lambda(params.alpha, rng, size=n)
    else:
        lam = np.full(n, float(force_lambda))
    mixed_in, mixed_t = mix(inputs, inputs[partner], targets, targets[partner], lam)
    mixed_h, _ = mix(embeds, embeds[partner], targets, targets[partner], lam)
    return MixedBatch(
        mixed_in[:n_x], mixed_h[:n_x], mixed_t[:n_x],
        mixed_in[n_x:], mixed_h[n_x:], mixed_t[n_x:],
        lam, partner,
    )
