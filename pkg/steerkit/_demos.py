"""Scripted expert and demonstration generation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from ._exceptions import ConfigError, DemoGenerationError, FitError
from ._tasks import TaskSpec, check_success, goal_point, nominal_scene
from ._world import STEP_CLAMP, ArticulatedPart, Scene, SceneObject, Zone, _dist, step_env

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

ARRIVAL_TOLERANCE = 0.02
DEFAULT_MAX_STEPS = 200


def _toward(scene: Scene, goal: Any) -> FloatArray:
    delta = np.asarray(goal, dtype=np.float64) - np.asarray(scene.gripper.position)
    return np.clip(delta, -STEP_CLAMP, STEP_CLAMP)


def expert_action(scene: Scene, task: TaskSpec) -> FloatArray:
    """One closed-loop action of the waypoint expert.

    Move tasks cycle reach, grasp, transport and release; articulated tasks
    reach the handle and then push it toward its goal position.
    """
    dim = scene.dim
    target = scene.find_label(task.target)
    action = np.zeros(dim + 1)
    if isinstance(target, SceneObject):
        zone = scene.find_label(task.predicate.zone or "")
        holding = scene.gripper.held == target.id
        if holding and isinstance(zone, Zone):
            if _dist(target.position, zone.center) <= ARRIVAL_TOLERANCE:
                action[dim] = -1.0
            else:
                action[:dim] = _toward(scene, zone.center)
                action[dim] = 1.0
        elif scene.gripper.closed:
            action[dim] = -1.0
        elif _dist(scene.gripper.position, target.position) > ARRIVAL_TOLERANCE:
            action[:dim] = _toward(scene, target.position)
            action[dim] = -1.0
        else:
            action[dim] = 1.0
        return action
    if isinstance(target, ArticulatedPart):
        if _dist(scene.gripper.position, target.handle) > ARRIVAL_TOLERANCE:
            action[:dim] = _toward(scene, target.handle)
        else:
            action[:dim] = _toward(scene, goal_point(target, task.predicate))
        action[dim] = -1.0
        return action
    raise ConfigError("task target", task.target, "an object or articulated part in the scene")


def _hold(scene: Scene) -> FloatArray:
    action = np.zeros(scene.dim + 1)
    action[-1] = 1.0 if scene.gripper.closed else -1.0
    return action


def expert_rollout(
    scene: Scene,
    task: TaskSpec,
    horizon: int,
    noise_scale: float,
    rng: np.random.Generator,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> tuple[FloatArray, bool]:
    """Run the expert until success or ``max_steps``; return ``(C, T, D)`` chunks and the outcome.

    Noise perturbs the positional deltas only, and is clamped with them. The
    final chunk is padded with hold actions.
    """
    actions: list[FloatArray] = []
    success = check_success(scene, task)
    while not success and len(actions) < max_steps:
        action = expert_action(scene, task)
        if noise_scale > 0.0:
            action[:-1] = np.clip(
                action[:-1] + rng.normal(0.0, noise_scale, size=scene.dim), -STEP_CLAMP, STEP_CLAMP
            )
        scene = step_env(scene, action)
        actions.append(action)
        success = check_success(scene, task)
    while len(actions) % horizon or not actions:
        actions.append(_hold(scene))
    chunks = np.stack(actions).reshape(-1, horizon, scene.dim + 1)
    return chunks, success


def generate_demos(
    task: TaskSpec,
    n: int,
    horizon: int = 8,
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
    *,
    scene: Scene | None = None,
    scene_jitter: float = 0.0,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> list[FloatArray]:
    """Collect ``n`` successful expert rollouts as ``(C, T, D)`` chunk sequences.

    At most ``2 * n`` rollouts are attempted; when fewer than ``n`` succeed the
    task and generation parameters are treated as inconsistent.
    """
    if n < 0:
        raise ConfigError("demo count", n, "a count >= 0")
    if horizon < 1:
        raise ConfigError("horizon", horizon, "a value >= 1")
    if noise_scale < 0.0:
        raise ConfigError("noise_scale", noise_scale, "a value >= 0")
    rng = rng if rng is not None else np.random.default_rng()
    demos: list[FloatArray] = []
    attempts = 0
    while len(demos) < n and attempts < 2 * n:
        attempts += 1
        start = scene if scene is not None else nominal_scene(task, rng, scene_jitter)
        chunks, ok = expert_rollout(start, task, horizon, noise_scale, rng, max_steps)
        if ok:
            demos.append(chunks)
        else:
            logger.debug("expert rollout %d failed for %r", attempts, task.instruction)
    if len(demos) < n:
        raise DemoGenerationError(len(demos), attempts)
    logger.info("generated %d demos for %r in %d attempts", n, task.instruction, attempts)
    return demos


def save_demos(demos: list[FloatArray], path: str | Path, *, task: TaskSpec | None = None) -> None:
    doc: dict[str, Any] = {
        "task": None if task is None else {"family": task.family, "instruction": task.instruction},
        "demos": [np.asarray(d, dtype=np.float64).tolist() for d in demos],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_demos(path: str | Path) -> list[FloatArray]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FitError(f"Demo file {str(path)!r} is not valid JSON ({exc.msg}).") from exc
    raw = doc.get("demos") if isinstance(doc, dict) else None
    if not isinstance(raw, list):
        raise FitError(f"Demo file {str(path)!r} has no 'demos' list.")
    return [np.asarray(d, dtype=np.float64) for d in raw]
