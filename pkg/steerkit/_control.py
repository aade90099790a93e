from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Literal

from scipy.special import expit

from ._exceptions import ConfigError, PlanningError
from ._reward_ast import RewardProgram

if TYPE_CHECKING:
    from ._planner import SceneSummary, StagePlanner

logger = logging.getLogger(__name__)

LambdaConvention = Literal["corrected", "literal"]

BASE_GUARD = 1e-6
DEFAULT_RETRY_LIMIT = 3
DEFAULT_REINFORCE_FACTOR = 1.5


class SwitchDecision(enum.Enum):
    ADVANCE = "advance"
    MAINTAIN = "maintain"
    REINFORCE = "reinforce"


@dataclass(frozen=True)
class ControllerConfig:
    lambda_max: float = 1.0
    retry_limit: int = DEFAULT_RETRY_LIMIT
    reinforce_factor: float = DEFAULT_REINFORCE_FACTOR
    convention: LambdaConvention = "corrected"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lambda_max) and self.lambda_max >= 0.0):
            raise ConfigError("lambda_max", self.lambda_max, "a finite value >= 0")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit", self.retry_limit, "a count >= 0")
        if not self.reinforce_factor >= 1.0:
            raise ConfigError("reinforce_factor", self.reinforce_factor, "a value >= 1")
        if self.convention not in ("corrected", "literal"):
            raise ConfigError("lambda convention", self.convention, "'corrected' or 'literal'")


@dataclass(frozen=True)
class StageState:
    """Controller state for the stage currently being executed.

    ``r_base`` is ``None`` until the stage's first chunk has been scored.
    """

    stage: int
    r_high: float
    r_low: float
    lam: float
    r_base: float | None = None
    reinforce_count: int = 0
    history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.stage < 1:
            raise ConfigError("stage index", self.stage, "a value >= 1")
        if not self.r_high > self.r_low:
            raise ConfigError("thresholds", (self.r_high, self.r_low), "R_high > R_low")
        if self.reinforce_count < 0:
            raise ConfigError("reinforce_count", self.reinforce_count, "a count >= 0")


def initial_state(program: RewardProgram, stage: int, lambda_max: float) -> StageState:
    st = program.stage(stage)
    return StageState(stage=stage, r_high=st.high, r_low=st.low, lam=lambda_max / 2.0)


@dataclass(frozen=True)
class ControllerStep:
    state: StageState
    program: RewardProgram
    decision: SwitchDecision
    complete: bool = False
    aborted: bool = False
    reason: str = ""
    restarted: bool = False


def adaptive_lambda(
    r_t: float,
    r_base: float,
    lambda_max: float,
    *,
    r_low: float | None = None,
    convention: LambdaConvention = "literal",
) -> float:
    """Guidance strength from reward progress.

    ``literal``: ``lambda_max * sigmoid(1 - r_t / r_base)``.
    ``corrected``: ``lambda_max * sigmoid(1 - rho)`` with
    ``rho = (r_t - r_low) / (r_base - r_low)`` clamped to [0, 2], so guidance
    falls as a distance-style reward rises toward 0. Either form returns
    ``lambda_max / 2`` when ``|r_base| < 1e-6``.
    """
    if abs(r_base) < BASE_GUARD:
        return lambda_max / 2.0
    if convention == "literal":
        return float(lambda_max * expit(1.0 - r_t / r_base))
    if r_low is None:
        raise ConfigError("r_low", None, "a lower threshold for the corrected convention")
    denom = r_base - r_low
    if abs(denom) < BASE_GUARD:
        return lambda_max / 2.0
    rho = min(max((r_t - r_low) / denom, 0.0), 2.0)
    return float(lambda_max * expit(1.0 - rho))


def schmitt_decide(r_t: float, r_high: float, r_low: float) -> SwitchDecision:
    if not r_high > r_low:
        raise ConfigError("thresholds", (r_high, r_low), "R_high > R_low")
    if r_t > r_high:
        return SwitchDecision.ADVANCE
    if r_t < r_low:
        return SwitchDecision.REINFORCE
    return SwitchDecision.MAINTAIN


def step_controller(
    state: StageState,
    r_t: float,
    planner: StagePlanner,
    program: RewardProgram,
    context: SceneSummary,
    config: ControllerConfig | None = None,
) -> ControllerStep:
    """Advance the stage machine by one executed chunk scored ``r_t``.

    Planner failures never propagate; they end the episode as aborted.
    """
    config = config or ControllerConfig()
    history = state.history + (r_t,)
    r_base = r_t if state.r_base is None else state.r_base
    decision = schmitt_decide(r_t, state.r_high, state.r_low)
    logger.debug("stage %d reward %.4g -> %s", state.stage, r_t, decision.value)

    try:
        if decision is SwitchDecision.ADVANCE:
            return _advance(state, history, planner, program, context, config)
        if decision is SwitchDecision.MAINTAIN:
            lam = adaptive_lambda(
                r_t, r_base, config.lambda_max, r_low=state.r_low, convention=config.convention
            )
            new = replace(state, lam=lam, r_base=r_base, history=history)
            return ControllerStep(new, program, decision)
        lam = min(state.lam * config.reinforce_factor, config.lambda_max)
        count = state.reinforce_count + 1
        new = replace(state, lam=lam, r_base=r_base, reinforce_count=count, history=history)
        if count <= config.retry_limit:
            return ControllerStep(new, program, decision)
        return _recover(new, planner, program, context, config)
    except PlanningError as exc:
        logger.warning("Planner failure at stage %d: %s", state.stage, exc)
        return ControllerStep(
            replace(state, history=history), program, decision, aborted=True, reason=str(exc)
        )


def _advance(
    state: StageState,
    history: tuple[float, ...],
    planner: StagePlanner,
    program: RewardProgram,
    context: SceneSummary,
    config: ControllerConfig,
) -> ControllerStep:
    reply = planner.next_stage(program, state.stage, context, history)
    if reply.action == "abort":
        return ControllerStep(
            replace(state, history=history), program, SwitchDecision.ADVANCE,
            aborted=True, reason=f"{planner.name} planner aborted after stage {state.stage}",
        )
    if reply.action == "restart_stage":
        return _restart(reply.stage or state.stage, reply.program or program, config, SwitchDecision.ADVANCE)
    program = reply.program or program
    if state.stage >= program.stage_count:
        done = replace(state, history=history)
        return ControllerStep(done, program, SwitchDecision.ADVANCE, complete=True)
    nxt = initial_state(program, state.stage + 1, config.lambda_max)
    logger.debug("advancing to stage %d (%s)", nxt.stage, program.stage(nxt.stage).name)
    return ControllerStep(nxt, program, SwitchDecision.ADVANCE)


def _recover(
    state: StageState,
    planner: StagePlanner,
    program: RewardProgram,
    context: SceneSummary,
    config: ControllerConfig,
) -> ControllerStep:
    reply = planner.recover(program, state.stage, context, state.history)
    if reply.action == "abort":
        return ControllerStep(
            state, program, SwitchDecision.REINFORCE,
            aborted=True, reason=f"{planner.name} planner aborted stage {state.stage}",
        )
    return _restart(reply.stage or state.stage, reply.program or program, config, SwitchDecision.REINFORCE)


def _restart(
    stage: int, program: RewardProgram, config: ControllerConfig, decision: SwitchDecision
) -> ControllerStep:
    stage = min(max(stage, 1), program.stage_count)
    fresh = initial_state(program, stage, config.lambda_max)
    logger.info("restarting stage %d", stage)
    return ControllerStep(fresh, program, decision, restarted=True)


