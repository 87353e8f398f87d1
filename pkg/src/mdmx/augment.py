"""Weak and strong stochastic augmentations for feature vectors.

Weak views add a little Gaussian jitter. Strong views add larger jitter, zero
out random coordinates and rescale the whole vector. Noise scales are given
as fractions of the per-feature standard deviation of the training inputs
(``scale``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import substream

WEAK, STRONG = "weak", "strong"
FOUR_VIEWS = (WEAK, WEAK, STRONG, STRONG)


@dataclass(frozen=True)
class AugmentSpec:
    weak_jitter_sigma: float = 0.05
    strong_jitter_sigma: float = 0.25
    strong_dropout_p: float = 0.2
    strong_scale_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        lo, hi = self.strong_scale_range
        if self.weak_jitter_sigma < 0 or self.strong_jitter_sigma < 0:
            raise ValueError("jitter sigmas must be non-negative")
        if not 0.0 <= self.strong_dropout_p < 1.0:
            raise ValueError(f"strong_dropout_p must lie in [0, 1), got {self.strong_dropout_p}")
        if not (0 < lo <= 1.0 <= hi):
            raise ValueError(f"strong_scale_range must satisfy 0 < lo <= 1 <= hi, got {self.strong_scale_range}")

    @classmethod
    def neutral(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0))


def _scale(x: np.ndarray, scale) -> np.ndarray:
    if scale is None:
        return np.ones(x.shape[-1])
    return np.broadcast_to(np.asarray(scale, dtype=np.float64), (x.shape[-1],))


def weak(x, spec: AugmentSpec, rng: np.random.Generator, scale=None) -> np.ndarray:
    """Gaussian jitter with std ``weak_jitter_sigma * scale``. Works on a vector or rows."""
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape)
    return x + noise * (spec.weak_jitter_sigma * _scale(x, scale))


def strong(x, spec: AugmentSpec, rng: np.random.Generator, scale=None) -> np.ndarray:
    """Jitter, then per-coordinate dropout, then a global rescale by ``U[lo, hi]``."""
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.standard_normal(x.shape) * (spec.strong_jitter_sigma * _scale(x, scale))
    keep = rng.random(x.shape) >= spec.strong_dropout_p
    out = np.where(keep, out, 0.0)
    lo, hi = spec.strong_scale_range
    factor = rng.uniform(lo, hi, size=x.shape[:-1] + (1,))
    return out * factor


_APPLY = {WEAK: weak, STRONG: strong}


def four_views(x, spec: AugmentSpec, rng: np.random.Generator, scale=None):
    """``(weak1, weak2, strong1, strong2)``, each drawn from its own child stream of ``rng``."""
    children = rng.spawn(4)
    return tuple(_APPLY[kind](x, spec, child, scale) for kind, child in zip(FOUR_VIEWS, children))


def epoch_views(features: np.ndarray, spec: AugmentSpec, scale, seed: int, epoch: int, kinds=FOUR_VIEWS) -> list[np.ndarray]:
    """Augmented copies of every row for one epoch.

    View ``v`` of sample ``i`` is row ``i`` of a draw from the stream keyed by
    ``(seed, epoch, v)``, so a sample's views do not depend on batch order.
    """
    return [
        _APPLY[kind](features, spec, substream(seed, epoch, v), scale)
        for v, kind in enumerate(kinds)
    ]
