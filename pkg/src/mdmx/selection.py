"""Sample selection: KNN density scores for OOD filtering and a loss GMM for the clean/noisy split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Model, predict_logits

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class OodScores:
    scores: np.ndarray
    k: int

    def __len__(self) -> int:
        return self.scores.shape[0]


def default_k(n: int, k_max: int = 100) -> int:
    return max(1, min(k_max, n // 10, n - 1))


def knn_ood_scores(H: np.ndarray, k: int, chunk: int = 512) -> OodScores:
    """Mean Euclidean distance from each row to its ``k`` nearest other rows.

    Squared distances are accumulated one coordinate at a time and the ``k``
    smallest distances are summed in ascending order, so the result does not
    depend on chunking or BLAS.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    if not np.all(np.isfinite(H)):
        raise ValueError("embeddings must be finite")
    scores = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = np.zeros((stop - start, n))
        for j in range(H.shape[1]):
            diff = H[start:stop, j, None] - H[None, :, j]
            d2 += diff * diff
        dist = np.sqrt(d2)
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        nearest = np.sort(dist, axis=1)[:, :k]
        scores[start:stop] = np.cumsum(nearest, axis=1)[:, -1] / k
    return OodScores(scores, k)


def _ceil_count(fraction: float, n: int) -> int:
    return int(math.ceil(fraction * n - 1e-9))


def rank_desc(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by smaller index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def ood_mask(scores: OodScores | np.ndarray, fraction: float) -> np.ndarray:
    """Mark the ``ceil(fraction * N)`` highest-scoring samples."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    s = scores.scores if isinstance(scores, OodScores) else np.asarray(scores)
    mask = np.zeros(s.shape[0], dtype=bool)
    mask[rank_desc(s)[: _ceil_count(fraction, s.shape[0])]] = True
    return mask


def per_sample_losses(model: Model, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain cross-entropy of each un-augmented sample against its given label."""
    logits = predict_logits(model, features)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(labels.shape[0]), labels]


@dataclass
class GmmFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    n_iter: int
    log_likelihood: float
    degenerate: bool = False
    trace: list[float] = field(default_factory=list)


def _log_normal(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _log_joint(x: np.ndarray, means, variances, weights) -> np.ndarray:
    return _log_normal(x[:, None], means[None, :], variances[None, :]) + np.log(weights)[None, :]


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(a - m).sum(axis=1))


def gmm_log_likelihood(x, means, variances, weights) -> float:
    return float(_logsumexp_rows(_log_joint(np.asarray(x, dtype=np.float64), means, variances, weights)).sum())


def fit_gmm_1d(losses, max_iters: int = 200, tol: float = 1e-6, variance_floor: float = VARIANCE_FLOOR) -> GmmFit:
    """Two-component 1-D Gaussian mixture fitted by EM.

    Starts from means at the 10th/90th percentiles, equal weights and the
    sample variance for both components. Stops once the mean per-sample
    log-likelihood improves by less than ``tol``. Component 0 is always the
    lower-mean one.
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 4:
        raise ValueError("need at least 4 losses")
    if not np.all(np.isfinite(x)):
        raise ValueError("losses must be finite")
    n = x.shape[0]
    var0 = float(np.var(x))
    if var0 < variance_floor:
        mu = float(np.mean(x))
        v = max(var0, variance_floor)
        means, variances, weights = np.array([mu, mu]), np.array([v, v]), np.array([0.5, 0.5])
        ll = gmm_log_likelihood(x, means, variances, weights)
        return GmmFit(means, variances, weights, 0, ll, degenerate=True, trace=[ll])

    means = np.percentile(x, [10.0, 90.0])
    variances = np.array([var0, var0])
    weights = np.array([0.5, 0.5])
    ll = gmm_log_likelihood(x, means, variances, weights)
    trace = [ll]
    it = 0
    for it in range(1, max_iters + 1):
        log_j = _log_joint(x, means, variances, weights)
        resp = np.exp(log_j - _logsumexp_rows(log_j)[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            break
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk, variance_floor)
        new_ll = gmm_log_likelihood(x, means, variances, weights)
        trace.append(new_ll)
        done = (new_ll - ll) / n < tol
        ll = new_ll
        if done:
            break
    order = np.argsort(means, kind="stable")
    return GmmFit(means[order], variances[order], weights[order], it, ll, degenerate=False, trace=trace)


def clean_posterior(fit: GmmFit, loss) -> np.ndarray | float:
    """Responsibility of the low-mean component for ``loss`` (scalar or array)."""
    scalar = np.ndim(loss) == 0
    x = np.atleast_1d(np.asarray(loss, dtype=np.float64))
    if fit.degenerate:
        w = np.ones_like(x)
    else:
        log_j = _log_joint(x, fit.means, fit.variances, fit.weights)
        w = np.exp(log_j[:, 0] - _logsumexp_rows(log_j))
    return float(w[0]) if scalar else w


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


@dataclass
class SplitResult:
    clean_probs: np.ndarray
    clean_indices: np.ndarray
    noisy_indices: np.ndarray
    threshold: float
    fallback: bool = False
    losses: np.ndarray | None = None


def _active_mask(active, n: int) -> np.ndarray:
    if active is None:
        return np.ones(n, dtype=bool)
    active = np.asarray(active)
    if active.dtype == bool:
        return active
    mask = np.zeros(n, dtype=bool)
    mask[active] = True
    return mask


def split_clean_noisy(w: np.ndarray, tau2: float, active=None) -> SplitResult:
    """Active samples with ``w >= tau2`` are clean, the rest noisy."""
    if not 0.0 < tau2 < 1.0:
        raise ValueError(f"tau2 must lie in (0, 1), got {tau2}")
    w = np.asarray(w, dtype=np.float64)
    act = _active_mask(active, w.shape[0])
    clean = act & (w >= tau2)
    noisy = act & ~(w >= tau2)
    return SplitResult(w, np.flatnonzero(clean), np.flatnonzero(noisy), tau2)


def lowest_loss_split(losses: np.ndarray, w: np.ndarray, tau2: float, active=None, fraction: float = 0.1) -> SplitResult:
    """Fallback split when nothing clears ``tau2``: the lowest-loss ``fraction`` of active samples is clean."""
    act = _active_mask(active, losses.shape[0])
    idx = np.flatnonzero(act)
    order = idx[np.argsort(losses[idx], kind="stable")]
    n_clean = max(1, _ceil_count(fraction, idx.shape[0]))
    clean = np.sort(order[:n_clean])
    noisy = np.sort(order[n_clean:])
    return SplitResult(w, clean, noisy, tau2, fallback=True)


def write_selection_csv(path, scores: np.ndarray, losses: np.ndarray, split: SplitResult, ood: np.ndarray) -> None:
    """Dump ``index,ood_score,loss,w,assigned`` with ``assigned`` in {ood, clean, noisy}."""
    assigned = np.full(scores.shape[0], "noisy", dtype=object)
    assigned[split.clean_indices] = "clean"
    assigned[ood] = "ood"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,ood_score,loss,w,assigned\n")
        for i in range(scores.shape[0]):
            fh.write(f"{i},{scores[i]:.17g},{losses[i]:.17g},{split.clean_probs[i]:.17g},{assigned[i]}\n")
