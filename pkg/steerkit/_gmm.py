from __future__ import annotations

import logging
from collections.abc import Sequence
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from ._exceptions import FitError
from ._policy import (
    COV_FLOOR,
    Backend,
    GaussianMixturePolicy,
    NoiseSchedule,
    build_noise_schedule,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

DEFAULT_ITERS = 100


def stack_demos(demos: Sequence[Any] | FloatArray) -> tuple[FloatArray, int, int]:
    """Flatten demonstration chunks to an (N, T*D) matrix.

    Entries may be single T x D chunks or (C, T, D) per-rollout stacks.
    """
    arrays = [np.asarray(d, dtype=np.float64) for d in demos]
    if not arrays:
        raise FitError("Cannot fit a mixture to an empty demonstration set.")
    horizon, action_dim = arrays[0].shape[-2:]
    rows = []
    for arr in arrays:
        if arr.ndim not in (2, 3) or arr.shape[-2:] != (horizon, action_dim):
            raise FitError(
                f"Demonstration shape {arr.shape} does not match T={horizon}, D={action_dim}."
            )
        rows.append(arr.reshape(-1, horizon * action_dim))
    x = np.concatenate(rows, axis=0)
    if not np.all(np.isfinite(x)):
        raise FitError("Demonstrations contain non-finite entries.")
    return x, int(horizon), int(action_dim)


def _kmeans_pp(x: FloatArray, m: int, rng: np.random.Generator) -> FloatArray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, m):
        d2 = np.min(
            np.sum((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2, axis=-1), axis=1
        )
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(x[idx])
    return np.array(centers)


def _joint_log_prob(
    x: FloatArray, log_w: FloatArray, means: FloatArray, variances: FloatArray
) -> FloatArray:
    diff = x[:, None, :] - means[None, :, :]
    log_pdf = -0.5 * np.sum(diff**2 / variances + np.log(2.0 * np.pi * variances), axis=-1)
    return log_w + log_pdf


def mixture_log_likelihood(
    x: FloatArray, weights: FloatArray, means: FloatArray, variances: FloatArray
) -> float:
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return float(np.sum(logsumexp(_joint_log_prob(x, log_w, means, variances), axis=1)))


def fit_gmm_em(
    demos: Sequence[Any] | FloatArray,
    m: int,
    iters: int = DEFAULT_ITERS,
    rng: np.random.Generator | None = None,
    *,
    condition_key: str = "",
    schedule: NoiseSchedule | None = None,
    backend: Backend = "diffusion",
    cov_floor: float = COV_FLOOR,
    tol: float = 0.0,
    history: list[float] | None = None,
) -> GaussianMixturePolicy:
    """Fit a diagonal-covariance mixture by EM with k-means++ seeding.

    Variances are floored at ``cov_floor`` in every M-step. When ``history`` is
    given, the data log-likelihood before each M-step is appended to it; the
    sequence is nondecreasing. ``tol > 0`` stops early once the relative
    improvement falls below it.
    """
    x, horizon, action_dim = stack_demos(demos)
    n = x.shape[0]
    if m < 1:
        raise FitError(f"Component count must be >= 1, got {m}.")
    if n < m:
        raise FitError(f"Need at least {m} demonstration chunks for {m} components, got {n}.")
    rng = rng if rng is not None else np.random.default_rng()

    means = _kmeans_pp(x, m, rng)
    variances = np.tile(np.maximum(x.var(axis=0), cov_floor), (m, 1))
    weights = np.full(m, 1.0 / m)

    previous = -np.inf
    for it in range(iters):
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        joint = _joint_log_prob(x, log_w, means, variances)
        norm = logsumexp(joint, axis=1, keepdims=True)
        ll = float(np.sum(norm))
        if history is not None:
            history.append(ll)
        resp = np.exp(joint - norm)

        nk = resp.sum(axis=0)
        alive = nk > 1e-10
        new_means = means.copy()
        new_vars = variances.copy()
        new_means[alive] = (resp[:, alive].T @ x) / nk[alive, None]
        for j in np.flatnonzero(alive):
            diff = x - new_means[j]
            new_vars[j] = resp[:, j] @ (diff * diff) / nk[j]
        means = new_means
        variances = np.maximum(new_vars, cov_floor)
        weights = nk / nk.sum()

        if tol > 0.0 and np.isfinite(previous) and ll - previous <= tol * abs(ll):
            logger.debug("EM converged after %d iterations (log-likelihood %.6g)", it + 1, ll)
            break
        previous = ll

    logger.info(
        "Fitted %d-component mixture to %d chunks (T=%d, D=%d, key=%r)",
        m, n, horizon, action_dim, condition_key,
    )
    return GaussianMixturePolicy(
        weights=weights,
        means=means,
        variances=variances,
        horizon=horizon,
        action_dim=action_dim,
        condition_key=condition_key,
        schedule=schedule if schedule is not None else build_noise_schedule(),
        backend=backend,
        cov_floor=cov_floor,
    )
