from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from ._exceptions import ConfigError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

_WEIGHT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ParticleBatch:
    """B action-chunk proposals at a common denoising step.

    ``rewards`` and ``weights`` are caches; operations that move particles
    return a batch with both cleared.
    """

    chunks: FloatArray
    rewards: FloatArray | None = None
    weights: FloatArray | None = None

    def __post_init__(self) -> None:
        if self.chunks.ndim != 3 or self.chunks.shape[0] < 1:
            raise ConfigError("particle chunks", self.chunks.shape, "a (B, T, D) array with B >= 1")
        b = self.chunks.shape[0]
        if self.rewards is not None and self.rewards.shape != (b,):
            raise ConfigError("particle rewards", self.rewards.shape, f"shape ({b},)")
        if self.weights is not None:
            w = self.weights
            if w.shape != (b,) or np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
                raise ConfigError("particle weights", w, "non-negative weights summing to 1")

    def __len__(self) -> int:
        return int(self.chunks.shape[0])

    @property
    def size(self) -> int:
        return len(self)

    @property
    def horizon(self) -> int:
        return int(self.chunks.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.chunks.shape[2])

    def moved(self, chunks: FloatArray) -> ParticleBatch:
        """Return a batch holding ``chunks`` with the caches invalidated."""
        return ParticleBatch(chunks=chunks)

    def with_rewards(self, rewards: Any) -> ParticleBatch:
        return replace(self, rewards=np.asarray(rewards, dtype=np.float64))


def fk_weights(rewards: Any) -> FloatArray:
    """Normalized potentials ``exp(R_i) / sum_j exp(R_j)`` computed in the log domain."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size == 0:
        raise ConfigError("rewards", r.size, "at least one particle")
    if not np.all(np.isfinite(r)):
        raise ConfigError("rewards", "non-finite entries", "finite rewards")
    w = np.exp(r - logsumexp(r))
    return w / w.sum()


def ess(weights: Any) -> float:
    """Effective sample size ``1 / sum w_i^2``."""
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def multinomial_ancestors(weights: Any, rng: np.random.Generator) -> IntArray:
    """Draw B ancestor indices with replacement, returned in ascending order."""
    w = np.asarray(weights, dtype=np.float64)
    counts = rng.multinomial(w.shape[0], w)
    return np.repeat(np.arange(w.shape[0]), counts)


def fk_resample(batch: ParticleBatch, weights: Any, rng: np.random.Generator) -> ParticleBatch:
    ancestors = multinomial_ancestors(weights, rng)
    return batch.moved(batch.chunks[ancestors])
