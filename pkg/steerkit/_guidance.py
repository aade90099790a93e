"""Inference-time steering of a frozen policy.

Each outer denoising step injects the reward gradient and, early on, a
bounded repulsion term into the base prediction and takes the reverse step.
Particles are then reweighted with Feynman-Kac potentials and resampled on a
fixed period, on low ESS and at the final step.

Two potentials are available:

* ``"difference"`` (default) weights each transition by the change of the
  twist ``R~`` (the reward of the chunk, or of its clean estimate) times the
  ratio between the base transition and the guided proposal. Inner moves are
  Metropolis-adjusted Langevin steps that leave ``p_k(a) exp(R~(a))``
  invariant. Together these target ``p(a) exp(R(a))`` at the clean end.
* ``"reward"`` reweights by ``exp(R)`` at each resampling and uses
  unadjusted Langevin-style inner updates whose noise shrinks with the noise
  level just reached.

Flow policies under the ``"difference"`` potential take stochastic steps
(``flow_noise`` > 0) since a deterministic step has no proposal density to
correct.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Literal

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import pdist

from ._exceptions import ConfigError
from ._particles import ParticleBatch, ess, fk_weights, multinomial_ancestors
from ._policy import (
    Backend,
    GaussianMixturePolicy,
    NoiseSchedule,
    clean_estimate_vjp,
    denoise_mean,
    denoise_step,
    epsilon_analytic,
    flow_grid,
    flow_kernel,
    flow_step,
    marginal_log_prob_and_score,
    marginal_scale,
    velocity_analytic,
)
from ._reward_ast import KeypointSet, RewardProgram
from ._reward_eval import reward_values, reward_values_and_grads
from ._typing import DiagnosticsRow

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
FKPotential = Literal["reward", "difference"]
Streams = np.random.Generator | Sequence[np.random.Generator] | None

DEFAULT_LAMBDA_MAX = 1.0
DEFAULT_BATCH_SIZE = 32
DEFAULT_MCMC_STEPS = {"diffusion": 4, "flow": 1}
DIAGNOSTICS_FIELDS = ("step", "reward_min", "reward_mean", "reward_max", "ess", "resampled")
# Caps the (rows, B, n) difference block built by the repulsion gradient.
_RBF_BLOCK_ELEMENTS = 1 << 22
# Particles used to estimate the repulsion bandwidth.
_BANDWIDTH_SAMPLE = 256


@dataclass(frozen=True)
class GuidanceConfig:
    """Steering parameters. ``mcmc_steps=None`` picks 4 for diffusion and 1 for flow."""

    lambda_max: float = DEFAULT_LAMBDA_MAX
    mcmc_steps: int | None = None
    mcmc_step_scale: float = 0.05
    mcmc_noise: float = 1.0
    rbf_epsilon: float = 1e-3
    rbf_window: float = 0.3
    rbf_strength: float = 0.1
    fk_period: int = 4
    ess_threshold: float = 0.5
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    use_gradient: bool = True
    use_rbf: bool = True
    use_fk: bool = True
    fk_potential: FKPotential = "difference"
    reward_on_clean_estimate: bool = False
    flow_noise: float = 1.0

    def __post_init__(self) -> None:
        for name in (
            "lambda_max", "mcmc_step_scale", "mcmc_noise", "rbf_epsilon", "rbf_window",
            "rbf_strength", "ess_threshold", "flow_noise",
        ):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(name, value, "a finite value")
        if self.lambda_max < 0.0:
            raise ConfigError("lambda_max", self.lambda_max, "a value >= 0")
        if self.mcmc_steps is not None and self.mcmc_steps < 0:
            raise ConfigError("mcmc_steps", self.mcmc_steps, "a count >= 0")
        if self.mcmc_step_scale <= 0.0:
            raise ConfigError("mcmc_step_scale", self.mcmc_step_scale, "a value > 0")
        if self.mcmc_noise < 0.0:
            raise ConfigError("mcmc_noise", self.mcmc_noise, "a value >= 0")
        if self.rbf_epsilon <= 0.0:
            raise ConfigError("rbf_epsilon", self.rbf_epsilon, "a value > 0")
        if not 0.0 <= self.rbf_window <= 1.0:
            raise ConfigError("rbf_window", self.rbf_window, "a fraction in [0, 1]")
        if self.rbf_strength < 0.0:
            raise ConfigError("rbf_strength", self.rbf_strength, "a value >= 0")
        if self.fk_period < 1:
            raise ConfigError("fk_period", self.fk_period, "a count >= 1")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ConfigError("ess_threshold", self.ess_threshold, "a fraction in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size", self.batch_size, "a count >= 1")
        if self.fk_potential not in ("reward", "difference"):
            raise ConfigError("fk_potential", self.fk_potential, "'reward' or 'difference'")
        if not 0.0 <= self.flow_noise <= 1.0:
            raise ConfigError("flow_noise", self.flow_noise, "a value in [0, 1]")

    @property
    def exact(self) -> bool:
        """Whether weights carry the proposal correction and inner moves are adjusted."""
        return self.use_fk and self.fk_potential == "difference"

    def resolved_mcmc_steps(self, backend: Backend) -> int:
        if self.mcmc_steps is not None:
            return self.mcmc_steps
        return DEFAULT_MCMC_STEPS[backend]

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> GuidanceConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            warnings.warn(
                f"Ignoring unknown guidance keys: {', '.join(unknown)}", RuntimeWarning, stacklevel=2
            )
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_mapping(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class GuidanceResult:
    best: FloatArray
    best_index: int
    best_reward: float
    batch: ParticleBatch
    rewards: FloatArray
    diagnostics: list[DiagnosticsRow] = field(default_factory=list)
    acceptance: float | None = None


# ---------------------------------------------------------------------------
#  Components
# ---------------------------------------------------------------------------

def rbf_repulsion_grad(batch: ParticleBatch | FloatArray, rbf_epsilon: float = 1e-3) -> FloatArray:
    """Gradient of ``sum_{j != i} 1 / (|a_i - a_j| + eps)`` with respect to each particle.

    The potential grows as particles approach; callers move against this
    gradient so that particles separate. Coincident pairs contribute zero.
    """
    chunks = batch.chunks if isinstance(batch, ParticleBatch) else np.asarray(batch, dtype=np.float64)
    b = chunks.shape[0]
    x = chunks.reshape(b, -1)
    out = np.zeros_like(x)
    if b == 1:
        return out.reshape(chunks.shape)
    rows = max(1, _RBF_BLOCK_ELEMENTS // (b * x.shape[1]))
    for start in range(0, b, rows):
        diff = x[start : start + rows, None, :] - x[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0.0, -1.0 / (dist * (dist + rbf_epsilon) ** 2), 0.0)
        out[start : start + rows] = np.einsum("ij,ijn->in", coef, diff)
    return out.reshape(chunks.shape)


def repulsion_direction(batch: ParticleBatch | FloatArray, rbf_epsilon: float = 1e-3) -> FloatArray:
    """Push each particle away from the others; every row has norm at most 1.

    Distances are measured in units of the median pairwise distance and the
    repulsion gradient is averaged over the other ``B - 1`` particles, so the
    push does not grow with the batch size or shrink with the noise level.
    """
    chunks = batch.chunks if isinstance(batch, ParticleBatch) else np.asarray(batch, dtype=np.float64)
    b = chunks.shape[0]
    if b == 1:
        return np.zeros_like(chunks)
    distances = pdist(chunks[:_BANDWIDTH_SAMPLE].reshape(min(b, _BANDWIDTH_SAMPLE), -1))
    distances = distances[distances > 0.0]
    bandwidth = float(np.median(distances)) if distances.size else 1.0
    push = -rbf_repulsion_grad(chunks / bandwidth, rbf_epsilon).reshape(b, -1) / (b - 1)
    norms = np.linalg.norm(push, axis=1, keepdims=True)
    push = push / np.maximum(norms, 1.0)
    return push.reshape(chunks.shape)


def apply_diffusion_guidance(
    eps: Any, g: Any, lam: float, k: int, sched: NoiseSchedule
) -> FloatArray:
    """``eps - lam * sqrt(1 - abar_k) * g``; a copy of ``eps`` when ``lam`` is 0."""
    eps = np.asarray(eps, dtype=np.float64)
    if lam == 0.0:
        return eps.copy()
    return eps - lam * math.sqrt(1.0 - sched.alpha_bar(k)) * np.asarray(g, dtype=np.float64)


def apply_flow_guidance(v: Any, g: Any, lam: float) -> FloatArray:
    """``v + lam * g``; a copy of ``v`` when ``lam`` is 0."""
    v = np.asarray(v, dtype=np.float64)
    if lam == 0.0:
        return v.copy()
    return v + lam * np.asarray(g, dtype=np.float64)


def mcmc_refine(
    batch: ParticleBatch,
    program: RewardProgram,
    s: int,
    kps: KeypointSet,
    lam: float,
    steps: int,
    step_scale: float,
    rng: Streams,
    *,
    grip_start: Any = None,
    noise: float = 1.0,
) -> ParticleBatch:
    """Langevin-style inner updates ``a += h * lam * grad R + noise * sqrt(2h) * xi``.

    ``rng`` may be a single generator or one generator per particle; with
    per-particle streams each particle's noise depends only on its index.
    """
    if steps < 0:
        raise ConfigError("mcmc steps", steps, "a count >= 0")
    if steps == 0 or (lam == 0.0 and noise == 0.0):
        return batch
    chunks = batch.chunks.copy()
    scale = math.sqrt(2.0 * step_scale) * noise
    for _ in range(steps):
        if lam != 0.0:
            _, grad = reward_values_and_grads(program, s, chunks, kps, grip_start)
            chunks = chunks + step_scale * lam * grad
        if noise > 0.0:
            chunks = chunks + scale * _standard_normal(rng, chunks.shape)
    return batch.moved(chunks)


def mala_refine(
    policy: GaussianMixturePolicy,
    batch: ParticleBatch,
    program: RewardProgram,
    s: int,
    kps: KeypointSet,
    level: float,
    steps: int,
    step_scale: float,
    rng: Streams,
    *,
    grip_start: Any = None,
    sched: NoiseSchedule | None = None,
    on_clean_estimate: bool = False,
) -> tuple[ParticleBatch, float]:
    """Metropolis-adjusted Langevin moves leaving ``p_level(a) * exp(R~(a))`` invariant.

    Proposals are preconditioned by the per-coordinate variance of the
    marginal at ``level``; ``step_scale`` is the step in those units.
    Returns the moved batch and the fraction of accepted proposals.
    """
    if steps < 0:
        raise ConfigError("mcmc steps", steps, "a count >= 0")
    if steps == 0:
        return batch, 1.0
    sched = sched or policy.schedule

    def log_target(x: FloatArray) -> tuple[FloatArray, FloatArray]:
        log_p, score = marginal_log_prob_and_score(policy, x, level, sched)
        values, grad = twist(
            policy, program, s, kps, x, level, sched,
            grip_start=grip_start, on_clean_estimate=on_clean_estimate, with_grad=True,
        )
        assert grad is not None
        return log_p + values, score + grad

    chunks = batch.chunks
    b = chunks.shape[0]
    precond = marginal_scale(policy, level, sched)
    spread = np.sqrt(2.0 * step_scale * precond)
    current, grad = log_target(chunks)
    accepted = 0
    for _ in range(steps):
        forward = chunks + step_scale * precond * grad
        proposal = forward + spread * _standard_normal(rng, chunks.shape)
        proposed, proposed_grad = log_target(proposal)
        backward = proposal + step_scale * precond * proposed_grad
        log_fwd = -0.5 * np.sum(((proposal - forward) / spread) ** 2, axis=(1, 2))
        log_bwd = -0.5 * np.sum(((chunks - backward) / spread) ** 2, axis=(1, 2))
        log_ratio = proposed - current + log_bwd - log_fwd
        with np.errstate(invalid="ignore"):
            accept = np.log(_uniform(rng, b)) < np.nan_to_num(log_ratio, nan=-np.inf)
        chunks = np.where(accept[:, None, None], proposal, chunks)
        grad = np.where(accept[:, None, None], proposed_grad, grad)
        current = np.where(accept, proposed, current)
        accepted += int(accept.sum())
    return batch.moved(chunks), accepted / (steps * b)


def _standard_normal(rng: Streams, shape: tuple[int, ...]) -> FloatArray:
    if rng is None:
        raise ConfigError("rng", None, "a generator when MCMC noise is enabled")
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(rng) != shape[0]:
        raise ConfigError("particle streams", len(rng), f"{shape[0]} streams")
    return np.stack([g.standard_normal(shape[1:]) for g in rng])


def _uniform(rng: Streams, count: int) -> FloatArray:
    if rng is None:
        raise ConfigError("rng", None, "a generator for Metropolis acceptance")
    if isinstance(rng, np.random.Generator):
        return rng.random(count)
    if len(rng) != count:
        raise ConfigError("particle streams", len(rng), f"{count} streams")
    return np.array([g.random() for g in rng])


# ---------------------------------------------------------------------------
#  Outer loop
# ---------------------------------------------------------------------------

def _predict(
    policy: GaussianMixturePolicy, chunks: FloatArray, level: float, sched: NoiseSchedule
) -> FloatArray:
    if policy.backend == "diffusion":
        return epsilon_analytic(policy, chunks, int(level), sched)
    return velocity_analytic(policy, chunks, float(level))


def _noise_level(backend: Backend, level: float, sched: NoiseSchedule) -> float:
    """Noise fraction of the marginal at ``level``; zero at the clean end."""
    if backend == "flow":
        return float(level)
    if level < 1:
        return 0.0
    return math.sqrt(1.0 - sched.alpha_bar(int(level)))


def _at_clean_end(policy: GaussianMixturePolicy, level: float) -> bool:
    return policy.backend == "diffusion" and level < 1


def clean_estimate(
    policy: GaussianMixturePolicy,
    chunks: FloatArray,
    pred: FloatArray | None,
    level: float,
    sched: NoiseSchedule,
) -> FloatArray:
    """One-step estimate of the clean chunk from a noisy one and its base prediction."""
    if pred is None:
        return chunks
    if policy.backend == "diffusion":
        ab = sched.alpha_bar(int(level))
        return (chunks - math.sqrt(1.0 - ab) * pred) / math.sqrt(ab)
    return chunks - level * pred


def twist(
    policy: GaussianMixturePolicy,
    program: RewardProgram,
    s: int,
    kps: KeypointSet,
    chunks: FloatArray,
    level: float,
    sched: NoiseSchedule,
    *,
    grip_start: Any = None,
    on_clean_estimate: bool = False,
    pred: FloatArray | None = None,
    with_grad: bool = False,
) -> tuple[FloatArray, FloatArray | None]:
    """Reward of the chunks (or of their clean estimates) and, on request, its gradient."""
    if not on_clean_estimate or _at_clean_end(policy, level):
        if not with_grad:
            return reward_values(program, s, chunks, kps, grip_start), None
        return reward_values_and_grads(program, s, chunks, kps, grip_start)
    if pred is None:
        pred = _predict(policy, chunks, level, sched)
    estimate = clean_estimate(policy, chunks, pred, level, sched)
    if not with_grad:
        return reward_values(program, s, estimate, kps, grip_start), None
    values, grad = reward_values_and_grads(program, s, estimate, kps, grip_start)
    return values, clean_estimate_vjp(policy, chunks, grad, level, sched)


def _transition(
    policy: GaussianMixturePolicy,
    chunks: FloatArray,
    pred: FloatArray,
    guided: FloatArray,
    level: float,
    next_level: float,
    sched: NoiseSchedule,
    config: GuidanceConfig,
    rng: np.random.Generator,
) -> tuple[FloatArray, FloatArray]:
    """Sample the guided proposal; returns the new chunks and the log ratio base / proposal."""
    b = chunks.shape[0]
    if policy.backend == "diffusion":
        k = int(level)
        base = denoise_mean(chunks, pred, k, sched)
        mean = base if guided is pred else denoise_mean(chunks, guided, k, sched)
        std = sched.sigma(k)
    else:
        base, std = flow_kernel(chunks, pred, level, next_level, config.flow_noise)
        mean = base if guided is pred else flow_kernel(chunks, guided, level, next_level, config.flow_noise)[0]
    if std == 0.0:
        # Without noise the proposal has no density; the base step is taken as is.
        return base, np.zeros(b)
    z = rng.standard_normal(chunks.shape)
    shift = (mean - base) / std
    log_ratio = -0.5 * np.sum(shift * shift, axis=(1, 2)) - np.sum(shift * z, axis=(1, 2))
    return mean + std * z, log_ratio


def guided_denoise(
    policy: GaussianMixturePolicy,
    program: RewardProgram,
    s: int,
    kps: KeypointSet,
    config: GuidanceConfig,
    lam: float,
    rng: np.random.Generator,
    *,
    grip_start: Any = None,
    sched: NoiseSchedule | None = None,
) -> GuidanceResult:
    """Run one steered reverse pass and return the best particle by final reward.

    With ``lam = 0`` and repulsion, FK and MCMC disabled, the draws from ``rng``
    and the resulting chunks match ``sample_unguided`` bit for bit.
    """
    if not lam >= 0.0:
        raise ConfigError("lambda", lam, "a value >= 0")
    sched = sched or policy.schedule
    b = config.batch_size
    exact = config.exact
    chunks = rng.standard_normal((b, policy.horizon, policy.action_dim))

    if policy.backend == "diffusion":
        levels = [(float(k), float(k - 1)) for k in range(sched.steps, 0, -1)]
    else:
        grid = flow_grid(sched.steps)
        levels = [(float(c), float(n)) for c, n in zip(grid[:-1], grid[1:])]
    n_steps = len(levels)
    rbf_steps = math.ceil(config.rbf_window * n_steps) if config.use_rbf else 0
    mcmc_steps = config.resolved_mcmc_steps(policy.backend) if config.use_gradient else 0
    streams: list[np.random.Generator] | None = None
    if mcmc_steps > 0 and (exact or config.mcmc_noise > 0.0):
        streams = rng.spawn(b)

    def score(x: FloatArray, at: float, pred_at: FloatArray | None) -> FloatArray:
        return twist(
            policy, program, s, kps, x, at, sched, grip_start=grip_start,
            on_clean_estimate=config.reward_on_clean_estimate, pred=pred_at,
        )[0]

    log_weights = np.zeros(b)
    previous = np.zeros(b)
    diagnostics: list[DiagnosticsRow] = []
    rewards = np.zeros(b)
    accepted: list[float] = []
    pred: FloatArray | None = _predict(policy, chunks, levels[0][0], sched)

    for idx, (level, next_level) in enumerate(levels):
        assert pred is not None
        guided = pred
        if config.use_gradient and lam > 0.0:
            _, direction = twist(
                policy, program, s, kps, chunks, level, sched, grip_start=grip_start,
                on_clean_estimate=config.reward_on_clean_estimate, pred=pred, with_grad=True,
            )
            if policy.backend == "diffusion":
                guided = apply_diffusion_guidance(pred, direction, lam, int(level), sched)
            else:
                # v is d a / dk and integration runs toward k = 0, so ascent needs -g.
                guided = apply_flow_guidance(pred, -direction, lam)
        if idx < rbf_steps and lam > 0.0 and config.rbf_strength > 0.0:
            push = repulsion_direction(chunks, config.rbf_epsilon)
            size = np.linalg.norm(pred.reshape(b, -1), axis=1).reshape(b, 1, 1)
            guided = guided - lam * config.rbf_strength * size * push

        if exact:
            chunks, correction = _transition(policy, chunks, pred, guided, level, next_level, sched, config, rng)
            log_weights = log_weights + correction
        elif policy.backend == "diffusion":
            chunks = denoise_step(chunks, guided, int(level), sched, rng)
        else:
            chunks = flow_step(chunks, guided, level - next_level)

        has_next = policy.backend == "flow" or next_level > 0
        if mcmc_steps > 0 and exact:
            pred = _predict(policy, chunks, next_level, sched) if has_next else None
            # Weights use the proposed particles; the moves keep the current target.
            rewards = score(chunks, next_level, pred)
            log_weights = log_weights + rewards - previous
            moved, rate = mala_refine(
                policy, ParticleBatch(chunks), program, s, kps, next_level, mcmc_steps,
                config.mcmc_step_scale, streams, grip_start=grip_start, sched=sched,
                on_clean_estimate=config.reward_on_clean_estimate,
            )
            accepted.append(rate)
            chunks = moved.chunks
            pred = _predict(policy, chunks, next_level, sched) if has_next else None
            rewards = score(chunks, next_level, pred)
            previous = rewards
        else:
            if mcmc_steps > 0:
                chunks = mcmc_refine(
                    ParticleBatch(chunks),
                    program,
                    s,
                    kps,
                    lam,
                    mcmc_steps,
                    config.mcmc_step_scale,
                    streams,
                    grip_start=grip_start,
                    noise=config.mcmc_noise * _noise_level(policy.backend, next_level, sched),
                ).chunks
            pred = _predict(policy, chunks, next_level, sched) if has_next else None
            rewards = score(chunks, next_level, pred)
            if exact:
                log_weights = log_weights + rewards - previous
                previous = rewards

        resampled = False
        current_ess = float(b)
        if config.use_fk:
            weights = fk_weights(log_weights) if exact else fk_weights(rewards)
            current_ess = ess(weights)
            final = idx == n_steps - 1
            if final or (idx + 1) % config.fk_period == 0 or current_ess / b < config.ess_threshold:
                ancestors = multinomial_ancestors(weights, rng)
                chunks = chunks[ancestors]
                rewards = rewards[ancestors]
                previous = previous[ancestors]
                if pred is not None:
                    pred = pred[ancestors]
                log_weights = np.zeros(b)
                resampled = True

        row: DiagnosticsRow = {
            "step": next_level,
            "reward_min": float(rewards.min()),
            "reward_mean": float(rewards.mean()),
            "reward_max": float(rewards.max()),
            "ess": current_ess,
            "resampled": resampled,
        }
        diagnostics.append(row)
        logger.debug(
            "step %.4g: reward mean %.4g max %.4g ess %.1f%s",
            next_level, row["reward_mean"], row["reward_max"], current_ess,
            " (resampled)" if resampled else "",
        )

    acceptance = float(np.mean(accepted)) if accepted else None
    if acceptance is not None:
        logger.debug("metropolis acceptance %.3f over %d levels", acceptance, len(accepted))
    best_index = int(np.argmax(rewards))
    return GuidanceResult(
        best=chunks[best_index].copy(),
        best_index=best_index,
        best_reward=float(rewards[best_index]),
        batch=ParticleBatch(chunks=chunks, rewards=rewards.copy()),
        rewards=rewards,
        diagnostics=diagnostics,
        acceptance=acceptance,
    )


def write_diagnostics_csv(rows: Sequence[DiagnosticsRow], out: str | Path | IO[str]) -> None:
    """Write diagnostics rows with a fixed header."""
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            write_diagnostics_csv(rows, fh)
        return
    writer = csv.DictWriter(out, fieldnames=list(DIAGNOSTICS_FIELDS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "resampled": int(row["resampled"])})
