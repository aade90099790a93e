"""Self-checks behind ``steerkit check``.

Each oracle compares an implementation against an independent reference:
finite differences, closed forms, importance sampling or exact replay.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.stats import chisquare

from ._control import SwitchDecision, adaptive_lambda, schmitt_decide
from ._guidance import GuidanceConfig, guided_denoise
from ._particles import fk_weights, multinomial_ancestors
from ._policy import (
    GaussianMixturePolicy,
    build_noise_schedule,
    epsilon_analytic,
    flow_log_prob,
    noised_log_prob,
    sample_unguided,
    velocity_analytic,
)
from ._reward_ast import KeypointSet, RewardDims, RewardProgram
from ._reward_eval import check_grad
from ._reward_parser import parse_reward

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

SCORE_TOLERANCE = 1e-5
AUTODIFF_TOLERANCE = 1e-4
FD_STEP = 1e-5
TILT_TARGET = (2.0, 0.0)
TILT_PROGRAM = "reward: -0.5 * ((a[0][0] - 2)^2 + a[0][1]^2);"
# Discretization allowance for the tilted mean and spread.
TILT_BIAS = 0.02
TILT_STD_TOL = 0.05


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
#  Generators shared with the test suite
# ---------------------------------------------------------------------------

def random_policy(
    rng: np.random.Generator,
    horizon: int = 2,
    action_dim: int = 2,
    components: int = 2,
    *,
    backend: str = "diffusion",
    steps: int = 16,
    var_range: tuple[float, float] = (0.3, 1.5),
) -> GaussianMixturePolicy:
    size = horizon * action_dim
    weights = rng.dirichlet(np.ones(components) * 2.0)
    return GaussianMixturePolicy(
        weights=weights / weights.sum(),
        means=rng.normal(0.0, 1.0, size=(components, size)),
        variances=rng.uniform(*var_range, size=(components, size)),
        horizon=horizon,
        action_dim=action_dim,
        condition_key="random",
        schedule=build_noise_schedule(steps),
        backend=backend,  # type: ignore[arg-type]
    )


def _rand_scalar(rng: np.random.Generator, dims: RewardDims, depth: int, in_reduce: bool = False) -> str:
    t = "t" if in_reduce else str(int(rng.integers(dims.T)))
    d = int(rng.integers(dims.D))
    q = int(rng.integers(dims.positional))
    j = int(rng.integers(dims.n))
    c = f"{rng.uniform(0.5, 2.0):.3f}"
    if depth <= 0:
        leaves = [f"a[{t}][{d}]", f"cum(a)[{t}][{q}]", f"(cum(a)[{t}][{q}] - p[{j}][{q}])", c]
        return leaves[int(rng.integers(len(leaves)))]
    choice = int(rng.integers(8))
    sub = lambda: _rand_scalar(rng, dims, depth - 1, in_reduce)  # noqa: E731
    if choice == 0:
        return f"norm2(cum(a)[{t}] - p[{j}])"
    if choice == 1:
        return f"dot(a[{t}], a[{t}]) * {c}"
    if choice == 2:
        fn = ("tanh", "sigmoid", "softplus")[int(rng.integers(3))]
        return f"{fn}({sub()})"
    if choice == 3:
        return f"({sub()} + {sub()})"
    if choice == 4:
        return f"({sub()} - {c} * {sub()})"
    if choice == 5:
        return f"({sub()})^2"
    if choice == 6 and not in_reduce:
        op = ("sum_t", "mean_t")[int(rng.integers(2))]
        return f"{op}({_rand_scalar(rng, dims, depth - 1, True)})"
    if choice == 7 and not in_reduce:
        return f"softmin_t(1.0, norm2(cum(a)[t] - p[{j}]))"
    return f"({sub()} * {sub()})"


def random_program(rng: np.random.Generator, dims: RewardDims, depth: int = 3) -> RewardProgram:
    """A random smooth single-stage program over ``dims``."""
    return parse_reward(f"reward: {_rand_scalar(rng, dims, depth)};", dims)


def random_keypoints(rng: np.random.Generator, dims: RewardDims) -> KeypointSet:
    return KeypointSet.from_pairs(
        [(f"k{i}", rng.uniform(0.0, 1.0, size=dims.positional).tolist()) for i in range(dims.n)],
        dims.positional,
    )


# ---------------------------------------------------------------------------
#  Oracles
# ---------------------------------------------------------------------------

def _fd_gradient(fn: Callable[[FloatArray], float], x: FloatArray, h: float = FD_STEP) -> FloatArray:
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def _rel(a: FloatArray, b: FloatArray, floor: float = 1e-3) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def score_oracle(trials: int = 200, seed: int = 0) -> tuple[bool, str]:
    """Analytic epsilon and velocity against finite differences of the marginal log densities.

    Flow velocities are checked through ``v = -(x + k * grad log p_k) / (1 - k)``.
    """
    rng = np.random.default_rng(seed)
    worst_eps = worst_vel = 0.0
    for _ in range(trials):
        policy = random_policy(rng, components=int(rng.integers(1, 4)))
        x = rng.normal(0.0, 1.0, size=(policy.horizon, policy.action_dim))
        k = int(rng.integers(1, policy.schedule.steps + 1))
        ab = policy.schedule.alpha_bar(k)
        fd = _fd_gradient(lambda y: float(noised_log_prob(policy, y, k, policy.schedule)), x)
        worst_eps = max(worst_eps, _rel(epsilon_analytic(policy, x, k, policy.schedule), -math.sqrt(1.0 - ab) * fd))

        kf = float(rng.uniform(0.05, 0.95))
        fd = _fd_gradient(lambda y: float(flow_log_prob(policy, y, kf)), x)
        worst_vel = max(worst_vel, _rel(velocity_analytic(policy, x, kf), -(x + kf * fd) / (1.0 - kf)))
    ok = worst_eps < SCORE_TOLERANCE and worst_vel < SCORE_TOLERANCE
    return ok, f"worst relative error eps {worst_eps:.2e}, velocity {worst_vel:.2e} over {trials} cases"


def autodiff_oracle(programs: int = 20, chunks: int = 10, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    dims = RewardDims(T=4, D=3, n=2)
    worst = 0.0
    for _ in range(programs):
        program = random_program(rng, dims)
        kps = random_keypoints(rng, dims)
        for _ in range(chunks):
            chunk = rng.normal(0.0, 0.5, size=(dims.T, dims.D))
            worst = max(worst, check_grad(program, 1, chunk, kps, h=FD_STEP))
    return worst < AUTODIFF_TOLERANCE, f"worst relative error {worst:.2e} over {programs * chunks} cases"


def fk_oracle(resamples: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    hand = fk_weights([0.0, math.log(2.0)])
    ok_hand = np.allclose(hand, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)
    r = np.random.default_rng(seed).normal(size=8)
    ok_shift = np.allclose(fk_weights(r), fk_weights(r + 123.0), atol=1e-12)
    big = fk_weights([1000.0, 0.0])
    ok_big = bool(np.all(np.isfinite(big))) and big[0] > 1.0 - 1e-12
    b = 10
    rng = np.random.default_rng(seed)
    counts = np.zeros(b)
    uniform = np.full(b, 1.0 / b)
    for _ in range(resamples):
        counts += np.bincount(multinomial_ancestors(uniform, rng), minlength=b)
    p_value = float(chisquare(counts).pvalue)
    ok = ok_hand and ok_shift and ok_big and p_value > 0.01
    return ok, f"hand {ok_hand}, shift {ok_shift}, overflow-safe {ok_big}, chi-square p={p_value:.3f}"


def controller_oracle(traces: int = 1000, seed: int = 0) -> tuple[bool, str]:
    checks = [
        abs(adaptive_lambda(-1.0, -1.0, 1.0) - 0.5) < 1e-12,
        abs(adaptive_lambda(0.0, -1.0, 1.0) - 0.7310585786300049) < 1e-12,
        abs(adaptive_lambda(-2.0, -1.0, 1.0) - 0.2689414213699951) < 1e-12,
        adaptive_lambda(-0.3, 1e-9, 1.0) == 0.5,
        schmitt_decide(-0.04, -0.05, -0.5) is SwitchDecision.ADVANCE,
        schmitt_decide(-0.275, -0.05, -0.5) is SwitchDecision.MAINTAIN,
        schmitt_decide(-0.51, -0.05, -0.5) is SwitchDecision.REINFORCE,
    ]
    rng = np.random.default_rng(seed)
    in_band = all(
        schmitt_decide(float(r), -0.05, -0.5) is SwitchDecision.MAINTAIN
        for _ in range(traces)
        for r in rng.uniform(-0.5, -0.05, size=int(rng.integers(1, 20)))
    )
    ok = all(checks) and in_band
    return ok, f"{sum(checks)}/{len(checks)} formula cases, hysteresis {'holds' if in_band else 'violated'}"


def all_off_oracle(cases: int = 100, seed: int = 0) -> tuple[bool, str]:
    """Steering with every component off must replay ``sample_unguided`` bit for bit."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(cases):
        backend = "diffusion" if i % 2 == 0 else "flow"
        policy = random_policy(rng, horizon=3, action_dim=3, components=int(rng.integers(1, 4)), backend=backend)
        dims = RewardDims(T=3, D=3, n=1)
        program = parse_reward("reward: -norm2(cum(a)[T-1] - p[0]);", dims)
        kps = random_keypoints(rng, dims)
        b = int(rng.integers(1, 9))
        cfg = GuidanceConfig(batch_size=b, use_rbf=False, use_fk=False, mcmc_steps=0)
        s = int(rng.integers(2**31))
        steered = guided_denoise(policy, program, 1, kps, cfg, 0.0, np.random.default_rng(s))
        plain = sample_unguided(policy, b, rng=np.random.default_rng(s))
        if not np.array_equal(steered.batch.chunks, plain.chunks):
            mismatches += 1
    return mismatches == 0, f"{cases - mismatches}/{cases} bitwise matches"


def tilted_posterior_oracle(
    batch_size: int = 4096, seed: int = 0, backends: tuple[str, ...] = ("diffusion", "flow")
) -> tuple[bool, str]:
    """Full steering of a standard-normal prior under a quadratic reward.

    Gradient guidance, repulsion, inner MCMC and FK resampling all run. The
    tilted posterior is ``N((1, 0), I / 2)``: the sample mean must agree with
    self-normalized importance sampling from the prior and the per-coordinate
    standard deviation with ``1 / sqrt(2)``.
    """
    dims = RewardDims(T=1, D=2, n=0)
    program = parse_reward(TILT_PROGRAM, dims)
    kps = KeypointSet(points=np.zeros((0, 1)), labels=())
    target = np.asarray(TILT_TARGET)
    tilted_std = math.sqrt(0.5)

    prior = np.random.default_rng(seed + 1).standard_normal((batch_size, 2))
    log_w = -0.5 * np.sum((prior - target) ** 2, axis=1)
    w = fk_weights(log_w)
    snis = w @ prior
    snis_se = np.sqrt((w**2) @ (prior - snis) ** 2)
    ok = bool(np.all(np.abs(snis - target / 2.0) <= 4.0 * snis_se + 1e-3))
    details = [f"IS mean ({snis[0]:.3f}, {snis[1]:.3f})"]

    steps = 200
    cfg = GuidanceConfig(batch_size=batch_size, seed=seed)
    for backend in backends:
        policy = GaussianMixturePolicy(
            weights=np.ones(1),
            means=np.zeros((1, 2)),
            variances=np.ones((1, 2)),
            horizon=1,
            action_dim=2,
            condition_key="tilt",
            schedule=build_noise_schedule(steps, 1e-4, 0.05),
            backend=backend,  # type: ignore[arg-type]
        )
        result = guided_denoise(policy, program, 1, kps, cfg, 1.0, np.random.default_rng(seed))
        samples = result.batch.chunks.reshape(batch_size, 2)
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
        n_eff = max(result.diagnostics[-1]["ess"], 1.0)
        se = std * math.sqrt(1.0 / n_eff + 1.0 / batch_size)
        tol = 3.0 * np.sqrt(se**2 + snis_se**2) + TILT_BIAS
        ok = ok and bool(np.all(np.abs(mean - snis) <= tol))
        ok = ok and bool(np.all(np.abs(std - tilted_std) <= TILT_STD_TOL))
        details.append(
            f"{backend} mean ({mean[0]:.3f}, {mean[1]:.3f}) std ({std[0]:.3f}, {std[1]:.3f})"
        )
    return ok, ", ".join(details)


ORACLES: dict[str, Callable[[bool], tuple[bool, str]]] = {
    "score": lambda quick: score_oracle(40 if quick else 200),
    "autodiff": lambda quick: autodiff_oracle(5 if quick else 20, 4 if quick else 10),
    "fk": lambda quick: fk_oracle(2_000 if quick else 10_000),
    "controller": lambda quick: controller_oracle(100 if quick else 1000),
    "all_off": lambda quick: all_off_oracle(10 if quick else 100),
    "tilted_posterior": lambda quick: tilted_posterior_oracle(1024 if quick else 4096),
}


def run_oracles(quick: bool = False, names: list[str] | None = None) -> list[OracleResult]:
    results = []
    for name in names or list(ORACLES):
        started = time.perf_counter()
        passed, detail = ORACLES[name](quick)
        result = OracleResult(name, passed, detail, time.perf_counter() - started)
        logger.info("%s", result.line())
        results.append(result)
    return results
