"""Frozen base policies with closed-form noise and velocity predictions.

A policy is a diagonal Gaussian mixture over flattened action chunks. Because
every noised marginal of such a mixture is again a mixture, the noise
prediction of a diffusion policy and the marginal velocity of a
flow-matching policy are available in closed form:

* diffusion: component ``m`` noised to step ``k`` has mean ``sqrt(abar_k) mu_m``
  and variance ``abar_k Sigma_m + (1 - abar_k)``; the noise prediction is
  ``-sqrt(1 - abar_k) * grad log p_k``.
* flow: along ``a^k = (1 - k) a^0 + k z`` the component marginal has mean
  ``(1 - k) mu_m`` and variance ``(1 - k)^2 Sigma_m + k^2``; the velocity is
  ``d a^k / dk = E[z - a^0 | a^k]``.

Step ``k = 1`` is noise for flow policies and ``k = K`` for diffusion policies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from ._exceptions import ConfigError, DomainError, PolicyDocumentError
from ._particles import ParticleBatch

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ActionChunk = FloatArray
Backend = Literal["diffusion", "flow"]

DEFAULT_STEPS = 32
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.3
K_MIN = 1e-3
COV_FLOOR = 1e-6
_WEIGHT_TOL = 1e-12
_BACKENDS = ("diffusion", "flow")


# ---------------------------------------------------------------------------
#  Action chunks
# ---------------------------------------------------------------------------

def as_chunk(values: Any, horizon: int | None = None, action_dim: int | None = None) -> ActionChunk:
    """Validate ``values`` as a finite T x D action chunk and return a float64 copy."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ConfigError("chunk shape", arr.shape, "a non-empty T x D matrix")
    if horizon is not None and arr.shape[0] != horizon:
        raise ConfigError("chunk horizon", arr.shape[0], f"T={horizon}")
    if action_dim is not None and arr.shape[1] != action_dim:
        raise ConfigError("chunk action dimension", arr.shape[1], f"D={action_dim}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("chunk values", "non-finite entries", "finite reals")
    return arr


# ---------------------------------------------------------------------------
#  Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Arrays are indexed by ``k - 1`` for steps ``k = 1..K``."""

    betas: FloatArray
    alphas: FloatArray
    alpha_bars: FloatArray
    sigmas: FloatArray

    @property
    def steps(self) -> int:
        return int(self.betas.shape[0])

    @property
    def beta_range(self) -> tuple[float, float]:
        return float(self.betas[0]), float(self.betas[-1])

    def _index(self, k: int) -> int:
        if int(k) != k or not 1 <= k <= self.steps:
            raise DomainError(float(k), f"Denoising step {k!r} outside 1..{self.steps}.")
        return int(k) - 1

    def alpha(self, k: int) -> float:
        return float(self.alphas[self._index(k)])

    def beta(self, k: int) -> float:
        return float(self.betas[self._index(k)])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[self._index(k)])

    def sigma(self, k: int) -> float:
        return float(self.sigmas[self._index(k)])


def build_noise_schedule(
    steps: int = DEFAULT_STEPS,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    if isinstance(steps, bool) or int(steps) != steps or steps < 1:
        raise ConfigError("step count", steps, "an integer >= 1")
    if not (math.isfinite(beta_min) and math.isfinite(beta_max)):
        raise ConfigError("beta bounds", (beta_min, beta_max), "finite values")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError("beta bounds", (beta_min, beta_max), "0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, int(steps))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    previous = np.concatenate(([1.0], alpha_bars[:-1]))
    sigmas = np.sqrt(betas * (1.0 - previous) / (1.0 - alpha_bars))
    sigmas[0] = 0.0
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def flow_grid(steps: int, k_min: float = K_MIN) -> FloatArray:
    """Euler grid from ``k = 1`` down to ``k_min`` with ``steps`` intervals."""
    if steps < 1:
        raise ConfigError("flow step count", steps, "an integer >= 1")
    if not 0.0 < k_min < 1.0:
        raise ConfigError("k_min", k_min, "a value in (0, 1)")
    return np.linspace(1.0, k_min, int(steps) + 1)


# ---------------------------------------------------------------------------
#  Mixture policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianMixturePolicy:
    """Diagonal Gaussian mixture over flattened T x D chunks, frozen at fit time."""

    weights: FloatArray
    means: FloatArray
    variances: FloatArray
    horizon: int
    action_dim: int
    condition_key: str
    schedule: NoiseSchedule
    backend: Backend = "diffusion"
    cov_floor: float = COV_FLOOR

    def __post_init__(self) -> None:
        size = self.horizon * self.action_dim
        if self.horizon < 1 or self.action_dim < 1:
            raise ConfigError("policy dims", (self.horizon, self.action_dim), "T >= 1 and D >= 1")
        if self.backend not in _BACKENDS:
            raise ConfigError("backend", self.backend, "'diffusion' or 'flow'")
        w = self.weights
        if w.ndim != 1 or w.shape[0] < 1:
            raise ConfigError("mixture weights", w.shape, "a non-empty vector")
        if self.means.shape != (w.shape[0], size) or self.variances.shape != self.means.shape:
            raise ConfigError(
                "mixture shapes",
                (self.means.shape, self.variances.shape),
                f"({w.shape[0]}, {size}) for means and variances",
            )
        if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
            raise ConfigError("mixture weights", float(w.sum()), "non-negative weights summing to 1")
        if not np.all(np.isfinite(self.means)):
            raise ConfigError("mixture means", "non-finite entries", "finite reals")
        if not np.all(self.variances >= self.cov_floor):
            raise ConfigError(
                "mixture variances", float(self.variances.min()), f"entries >= {self.cov_floor}"
            )

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def size(self) -> int:
        return self.horizon * self.action_dim

    @property
    def log_weights(self) -> FloatArray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def with_backend(self, backend: Backend) -> GaussianMixturePolicy:
        return GaussianMixturePolicy(
            weights=self.weights,
            means=self.means,
            variances=self.variances,
            horizon=self.horizon,
            action_dim=self.action_dim,
            condition_key=self.condition_key,
            schedule=self.schedule,
            backend=backend,
            cov_floor=self.cov_floor,
        )

    def _flatten(self, a: Any) -> tuple[FloatArray, tuple[int, ...]]:
        arr = np.asarray(a, dtype=np.float64)
        if arr.shape[-2:] != (self.horizon, self.action_dim):
            raise ConfigError(
                "chunk shape", arr.shape, f"trailing dims ({self.horizon}, {self.action_dim})"
            )
        lead = arr.shape[:-2]
        return arr.reshape(lead + (self.size,)), arr.shape


def _log_responsibilities(
    log_weights: FloatArray, diff: FloatArray, variances: FloatArray
) -> FloatArray:
    """Normalized log responsibilities; ``diff`` is (..., M, n), ``variances`` broadcasts to it."""
    log_pdf = -0.5 * np.sum(diff**2 / variances + np.log(2.0 * np.pi * variances), axis=-1)
    joint = log_weights + log_pdf
    return joint - logsumexp(joint, axis=-1, keepdims=True)


def noised_log_prob(
    policy: GaussianMixturePolicy, a_k: Any, k: int, sched: NoiseSchedule
) -> FloatArray:
    """Log density of the diffusion-noised mixture at step ``k``."""
    x, shape = policy._flatten(a_k)
    ab = sched.alpha_bar(k)
    var = ab * policy.variances + (1.0 - ab)
    diff = x[..., None, :] - math.sqrt(ab) * policy.means
    log_pdf = -0.5 * np.sum(diff**2 / var + np.log(2.0 * np.pi * var), axis=-1)
    return logsumexp(policy.log_weights + log_pdf, axis=-1)


def flow_log_prob(policy: GaussianMixturePolicy, a_k: Any, k: float) -> FloatArray:
    """Log density of the flow marginal at time ``k`` along the linear path."""
    if not 0.0 <= k <= 1.0:
        raise DomainError(k, f"Flow time {k!r} outside [0, 1].")
    x, _ = policy._flatten(a_k)
    var = (1.0 - k) ** 2 * policy.variances + k**2
    diff = x[..., None, :] - (1.0 - k) * policy.means
    log_pdf = -0.5 * np.sum(diff**2 / var + np.log(2.0 * np.pi * var), axis=-1)
    return logsumexp(policy.log_weights + log_pdf, axis=-1)


def epsilon_analytic(
    policy: GaussianMixturePolicy, a_k: Any, k: int, sched: NoiseSchedule
) -> FloatArray:
    """Exact noise prediction ``-sqrt(1 - abar_k) * grad log p_k(a_k)``.

    ``a_k`` may carry leading batch dimensions; the result has the same shape.
    """
    x, shape = policy._flatten(a_k)
    ab = sched.alpha_bar(k)
    var = ab * policy.variances + (1.0 - ab)
    diff = x[..., None, :] - math.sqrt(ab) * policy.means
    resp = np.exp(_log_responsibilities(policy.log_weights, diff, var))
    score = -np.sum(resp[..., None] * diff / var, axis=-2)
    return (-math.sqrt(1.0 - ab) * score).reshape(shape)


def velocity_analytic(policy: GaussianMixturePolicy, a_k: Any, k: float) -> FloatArray:
    """Exact marginal velocity ``d a^k / dk`` for ``k`` in (0, 1]."""
    if not 0.0 < k <= 1.0:
        raise DomainError(
            k,
            f"Velocity is defined for k in (0, 1]; got {k!r}. Stop integration at k_min instead.",
        )
    x, shape = policy._flatten(a_k)
    sigma = policy.variances
    var = (1.0 - k) ** 2 * sigma + k**2
    diff = x[..., None, :] - (1.0 - k) * policy.means
    resp = np.exp(_log_responsibilities(policy.log_weights, diff, var))
    per_component = (k - (1.0 - k) * sigma) / var * diff - policy.means
    return np.sum(resp[..., None] * per_component, axis=-2).reshape(shape)


def _level_scales(policy: GaussianMixturePolicy, level: float, sched: NoiseSchedule) -> tuple[float, float]:
    """Signal scale ``c`` and noise variance ``n2`` with ``a^level = c * a^0 + sqrt(n2) * z``.

    Diffusion levels run over ``0..K`` (level 0 is the clean mixture); flow
    levels are times in ``[0, 1]``.
    """
    if policy.backend == "flow":
        k = float(level)
        if not 0.0 <= k <= 1.0:
            raise DomainError(k, f"Flow time {k!r} outside [0, 1].")
        return 1.0 - k, k * k
    k = int(level)
    if k == 0:
        return 1.0, 0.0
    ab = sched.alpha_bar(k)
    return math.sqrt(ab), 1.0 - ab


def marginal_log_prob_and_score(
    policy: GaussianMixturePolicy, a_k: Any, level: float, sched: NoiseSchedule | None = None
) -> tuple[FloatArray, FloatArray]:
    """Log density and score of the policy marginal at ``level``, for either backend."""
    sched = sched or policy.schedule
    c, n2 = _level_scales(policy, level, sched)
    x, shape = policy._flatten(a_k)
    var = c * c * policy.variances + n2
    diff = x[..., None, :] - c * policy.means
    log_pdf = -0.5 * np.sum(diff**2 / var + np.log(2.0 * np.pi * var), axis=-1)
    joint = policy.log_weights + log_pdf
    log_p = logsumexp(joint, axis=-1)
    resp = np.exp(joint - log_p[..., None])
    score = -np.sum(resp[..., None] * diff / var, axis=-2)
    return log_p, score.reshape(shape)


def marginal_scale(policy: GaussianMixturePolicy, level: float, sched: NoiseSchedule | None = None) -> FloatArray:
    """Per-coordinate variance of the marginal at ``level`` averaged over components, shaped (T, D)."""
    sched = sched or policy.schedule
    c, n2 = _level_scales(policy, level, sched)
    var = policy.weights @ (c * c * policy.variances + n2)
    return var.reshape(policy.horizon, policy.action_dim)


def clean_estimate_vjp(
    policy: GaussianMixturePolicy,
    a_k: Any,
    cotangent: Any,
    level: float,
    sched: NoiseSchedule | None = None,
) -> FloatArray:
    """Pull ``cotangent`` back through the posterior mean ``E[a^0 | a^level]``.

    Returns ``J^T u`` where ``J`` is the Jacobian of the clean estimate with
    respect to the noisy chunk. For a diagonal mixture each component's
    posterior mean is affine in ``a^level``; the responsibilities contribute
    the second term.
    """
    sched = sched or policy.schedule
    c, n2 = _level_scales(policy, level, sched)
    x, shape = policy._flatten(a_k)
    u = np.asarray(cotangent, dtype=np.float64).reshape(x.shape)
    var = c * c * policy.variances + n2
    diff = x[..., None, :] - c * policy.means
    resp = np.exp(_log_responsibilities(policy.log_weights, diff, var))
    gain = c * policy.variances / var
    post_mean = policy.means + gain * diff
    grad_log = -diff / var
    grad_bar = np.sum(resp[..., None] * grad_log, axis=-2, keepdims=True)
    direct = np.sum(resp[..., None] * gain, axis=-2) * u
    proj = np.sum(post_mean * u[..., None, :], axis=-1)
    mixing = np.sum((resp * proj)[..., None] * (grad_log - grad_bar), axis=-2)
    return (direct + mixing).reshape(shape)


# ---------------------------------------------------------------------------
#  Reverse updates
# ---------------------------------------------------------------------------

def denoise_step(
    a_k: Any,
    eps_hat: Any,
    k: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> FloatArray:
    """One ancestral DDPM update from step ``k`` to ``k - 1``. No noise is drawn when sigma is 0."""
    a = np.asarray(a_k, dtype=np.float64)
    mean = denoise_mean(a, eps_hat, k, sched)
    sigma = sched.sigma(k)
    if sigma > 0.0:
        return mean + sigma * rng.standard_normal(a.shape)
    return mean


def denoise_mean(a_k: Any, eps_hat: Any, k: int, sched: NoiseSchedule) -> FloatArray:
    """Mean of the ancestral update from step ``k``; its standard deviation is ``sched.sigma(k)``."""
    a = np.asarray(a_k, dtype=np.float64)
    eps = np.asarray(eps_hat, dtype=np.float64)
    alpha = sched.alpha(k)
    ab = sched.alpha_bar(k)
    return (a - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)


def flow_step(a_k: Any, v_hat: Any, dk: float) -> FloatArray:
    """Euler step toward the clean end: ``a_{k - dk} = a_k - dk * v_hat``."""
    if not dk > 0.0:
        raise ConfigError("flow step size", dk, "a positive value")
    return np.asarray(a_k, dtype=np.float64) - dk * np.asarray(v_hat, dtype=np.float64)


def flow_kernel(a_k: Any, v_hat: Any, k: float, k_next: float, eta: float) -> tuple[FloatArray, float]:
    """Mean and standard deviation of a stochastic flow update from ``k`` to ``k_next``.

    The chunk is split into its clean estimate ``a - k v`` and noise estimate
    ``a + (1 - k) v``; the noise part is partially refreshed. ``eta = 0``
    reproduces the Euler step and ``eta = 1`` matches the ancestral variance
    of the equivalent variance-preserving chain. The injected noise vanishes
    as ``k_next`` approaches 0.
    """
    if not 0.0 <= k_next < k <= 1.0:
        raise ConfigError("flow times", (k, k_next), "0 <= k_next < k <= 1")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("flow noise", eta, "a value in [0, 1]")
    a = np.asarray(a_k, dtype=np.float64)
    v = np.asarray(v_hat, dtype=np.float64)
    if k >= 1.0:
        shrink = 0.0
    else:
        shrink = (k_next * (1.0 - k) / (k * (1.0 - k_next))) ** 2
    var = eta * k_next * k_next * (1.0 - shrink)
    clean = a - k * v
    noise = a + (1.0 - k) * v
    mean = (1.0 - k_next) * clean + math.sqrt(max(k_next * k_next - var, 0.0)) * noise
    return mean, math.sqrt(var)


def sample_unguided(
    policy: GaussianMixturePolicy,
    batch_size: int,
    sched: NoiseSchedule | None = None,
    rng: np.random.Generator | None = None,
) -> ParticleBatch:
    """Draw ``batch_size`` clean chunks from the frozen policy without any guidance."""
    if batch_size < 1:
        raise ConfigError("batch size", batch_size, "an integer >= 1")
    sched = sched or policy.schedule
    rng = rng if rng is not None else np.random.default_rng()
    chunks = rng.standard_normal((batch_size, policy.horizon, policy.action_dim))
    if policy.backend == "diffusion":
        for k in range(sched.steps, 0, -1):
            eps = epsilon_analytic(policy, chunks, k, sched)
            chunks = denoise_step(chunks, eps, k, sched, rng)
    else:
        grid = flow_grid(sched.steps)
        for k_cur, k_next in zip(grid[:-1], grid[1:]):
            v = velocity_analytic(policy, chunks, float(k_cur))
            chunks = flow_step(chunks, v, float(k_cur - k_next))
    return ParticleBatch(chunks=chunks)


# ---------------------------------------------------------------------------
#  Documents
# ---------------------------------------------------------------------------

def policy_to_document(policy: GaussianMixturePolicy) -> dict[str, Any]:
    beta_min, beta_max = policy.schedule.beta_range
    return {
        "T": policy.horizon,
        "D": policy.action_dim,
        "K": policy.schedule.steps,
        "betas": [beta_min, beta_max],
        "backend": policy.backend,
        "condition_key": policy.condition_key,
        "cov_floor": policy.cov_floor,
        "components": [
            {
                "weight": float(w),
                "mean": [float(v) for v in mu],
                "diag_cov": [float(v) for v in var],
            }
            for w, mu, var in zip(policy.weights, policy.means, policy.variances)
        ],
    }


def _require(doc: dict[str, Any], key: str, path: str) -> Any:
    if key not in doc:
        raise PolicyDocumentError(f"{path}.{key}" if path else key, "missing field")
    return doc[key]


def policy_from_document(doc: dict[str, Any]) -> GaussianMixturePolicy:
    if not isinstance(doc, dict):
        raise PolicyDocumentError("$", "expected a JSON object")
    horizon = int(_require(doc, "T", ""))
    action_dim = int(_require(doc, "D", ""))
    steps = int(_require(doc, "K", ""))
    betas = _require(doc, "betas", "")
    if not isinstance(betas, list) or len(betas) != 2:
        raise PolicyDocumentError("betas", "expected [beta_min, beta_max]")
    components = _require(doc, "components", "")
    if not isinstance(components, list) or not components:
        raise PolicyDocumentError("components", "expected a non-empty list")
    size = horizon * action_dim
    weights, means, variances = [], [], []
    for i, comp in enumerate(components):
        where = f"components[{i}]"
        if not isinstance(comp, dict):
            raise PolicyDocumentError(where, "expected an object")
        mean = _require(comp, "mean", where)
        cov = _require(comp, "diag_cov", where)
        if len(mean) != size:
            raise PolicyDocumentError(f"{where}.mean", f"expected {size} entries, got {len(mean)}")
        if len(cov) != size:
            raise PolicyDocumentError(f"{where}.diag_cov", f"expected {size} entries, got {len(cov)}")
        weights.append(float(_require(comp, "weight", where)))
        means.append(mean)
        variances.append(cov)
    try:
        return GaussianMixturePolicy(
            weights=np.array(weights, dtype=np.float64),
            means=np.array(means, dtype=np.float64),
            variances=np.array(variances, dtype=np.float64),
            horizon=horizon,
            action_dim=action_dim,
            condition_key=str(_require(doc, "condition_key", "")),
            schedule=build_noise_schedule(steps, float(betas[0]), float(betas[1])),
            backend=doc.get("backend", "diffusion"),
            cov_floor=float(doc.get("cov_floor", COV_FLOOR)),
        )
    except ConfigError as exc:
        raise PolicyDocumentError(exc.field, str(exc)) from exc


def save_policy(policy: GaussianMixturePolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy_to_document(policy), indent=2), encoding="utf-8")
    logger.info("Policy %r written to %s", policy.condition_key, path)


def load_policy(path: str | Path) -> GaussianMixturePolicy:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PolicyDocumentError(str(path), f"not valid JSON ({exc.msg})") from exc
    return policy_from_document(doc)
