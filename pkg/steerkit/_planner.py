"""Stage planners: turn an instruction and a scene summary into a reward program."""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

from ._exceptions import PlanningError, RewardSyntaxError
from ._reward_ast import KeypointSet, RewardDims, RewardProgram
from ._reward_parser import parse_reward
from ._tasks import TaskSpec, check_success, ground_keypoints, parse_instruction
from ._typing import DimsDoc, KeypointDoc
from ._world import Scene

logger = logging.getLogger(__name__)

PlannerAction = Literal["continue", "restart_stage", "abort"]

DEFAULT_TIMEOUT = 30.0

# Keypoint slots: {obj} / {goal} are keypoint indices, {g} is the gripper channel.
# A base-policy chunk spans a whole demonstration, so each stage scores the
# remaining subgoals as events anywhere along the chunk: closing the gripper
# at the cube (open one step earlier) and opening it at the zone.
MOVE_TEMPLATE = """\
stage reach "bring the gripper to the {target}" {{
  reward: -200 * (softmin_t(0.01, norm2(cum(a)[t] - p[{obj}]))
                  + softmin_t(0.01, norm2(cum(a)[t] - p[{goal}]) + sigmoid(10 * a[t][{g}]) + sigmoid(-10 * a[t-1][{g}])));
  high: -10;
  low: -120;
}}
stage grasp "close the gripper on the {target}" {{
  reward: -200 * (softmin_t(0.01, norm2(cum(a)[t] - p[{obj}]) + sigmoid(-10 * a[t][{g}]) + sigmoid(10 * a[t-1][{g}]))
                  + softmin_t(0.01, norm2(cum(a)[t] - p[{goal}]) + sigmoid(10 * a[t][{g}]) + sigmoid(-10 * a[t-1][{g}])));
  high: -10;
  low: -120;
}}
stage place "carry the {target} into the {zone}" {{
  reward: -200 * softmin_t(0.01, norm2(cum(a)[t] - p[{goal}]) + sigmoid(10 * a[t][{g}]) + sigmoid(-10 * a[t-1][{g}]));
  high: -8;
  low: -80;
}}
"""

PART_TEMPLATE = """\
stage reach "bring the gripper to the {target} handle" {{
  reward: -200 * (softmin_t(0.01, norm2(cum(a)[t] - p[{obj}])) + 0.5 * norm2(cum(a)[T-1] - p[{goal}]));
  high: -10;
  low: -120;
}}
stage actuate "drive the {target} handle to its goal" {{
  reward: -200 * (softmin_t(0.01, norm2(cum(a)[t] - p[{obj}])) + norm2(cum(a)[T-1] - p[{goal}]));
  high: -6;
  low: -120;
}}
"""


@dataclass(frozen=True)
class SceneSummary:
    """What a planner sees: keypoints with labels, program dims and symbolic facts."""

    keypoints: KeypointSet
    dims: RewardDims
    held: str | None = None
    joints: dict[str, float] = field(default_factory=dict, hash=False)
    success: bool = False

    @property
    def labels(self) -> tuple[str, ...]:
        return self.keypoints.labels


def summarize(scene: Scene, task: TaskSpec, horizon: int) -> SceneSummary:
    kps = ground_keypoints(scene, task)
    return SceneSummary(
        keypoints=kps,
        dims=RewardDims(T=horizon, D=scene.dim + 1, n=len(kps)),
        held=scene.held_label(),
        joints={p.label: p.joint for p in scene.parts},
        success=check_success(scene, task),
    )


@dataclass(frozen=True)
class PlannerReply:
    action: PlannerAction = "continue"
    program: RewardProgram | None = None
    stage: int | None = None


class StagePlanner(ABC):
    name = "abstract"

    @abstractmethod
    def plan(self, summary: SceneSummary, instruction: str) -> RewardProgram: ...

    @abstractmethod
    def next_stage(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply: ...

    @abstractmethod
    def recover(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply: ...

    def close(self) -> None:
        return None


class ScriptedPlanner(StagePlanner):
    """Template lookup by task family with keypoint substitution.

    Stage completions are checked against the scene facts: a finished grasp
    must hold the target, and the last stage must satisfy the task.
    """

    name = "scripted"

    def __init__(self) -> None:
        self._task: TaskSpec | None = None

    def plan(self, summary: SceneSummary, instruction: str) -> RewardProgram:
        task = parse_instruction(instruction)
        if task is None:
            raise PlanningError(self.name, f"no template for instruction {instruction!r}")
        self._task = task
        labels = summary.labels
        try:
            if task.family == "move_cube_to_zone":
                assert task.predicate.zone is not None
                text = MOVE_TEMPLATE.format(
                    target=task.target.replace("_", " "),
                    zone=task.predicate.zone.replace("_", " "),
                    obj=labels.index(task.target),
                    goal=labels.index(task.predicate.zone),
                    g=summary.dims.D - 1,
                )
            else:
                text = PART_TEMPLATE.format(
                    target=task.target,
                    obj=labels.index(task.target),
                    goal=labels.index(f"{task.target}_goal"),
                )
        except ValueError as exc:
            raise PlanningError(self.name, f"keypoint missing from scene summary ({exc})") from exc
        try:
            return parse_reward(text, summary.dims)
        except RewardSyntaxError as exc:
            raise PlanningError(self.name, f"template failed to parse: {exc}") from exc

    def _fallback_stage(self, program: RewardProgram, summary: SceneSummary) -> int | None:
        """The grasp stage when a move task has lost its cube."""
        task = self._task
        if task is None or task.family != "move_cube_to_zone" or summary.held == task.target:
            return None
        names = [s.name for s in program.stages]
        return names.index("grasp") + 1 if "grasp" in names else 1

    def next_stage(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply:
        name = program.stage(stage).name
        task = self._task
        if summary.success:
            return PlannerReply("continue")
        if name == "grasp" and task is not None and summary.held != task.target:
            return PlannerReply("restart_stage", stage=self._fallback_stage(program, summary) or stage)
        if stage == program.stage_count:
            return PlannerReply("restart_stage", stage=self._fallback_stage(program, summary) or stage)
        return PlannerReply("continue")

    def recover(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply:
        if stage > 1:
            return PlannerReply("restart_stage", stage=self._fallback_stage(program, summary) or stage)
        return PlannerReply("restart_stage", stage=stage)


class ExternalPlanner(StagePlanner):
    """Adapter to a child process speaking newline-delimited JSON on stdin/stdout.

    Each request is one JSON object per line; the child answers with one line
    holding ``{"program": "<reward text>"}`` or ``{"action": "restart_stage" | "abort"}``.
    """

    name = "external"

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_TIMEOUT) -> None:
        if timeout <= 0:
            raise ValueError(f"Invalid planner timeout: {timeout!r}. Expected a positive value.")
        self._command = list(command)
        self._timeout = timeout
        self._instruction = ""
        self._proc: subprocess.Popen[str] | None = None
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._lock = threading.Lock()

    def _start(self) -> subprocess.Popen[str]:
        if self._proc is not None and self._proc.poll() is None:
            return self._proc
        try:
            proc = subprocess.Popen(
                self._command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise PlanningError(self.name, f"cannot start {self._command!r}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(proc, self._lines), daemon=True).start()
        self._proc = proc
        return proc

    @staticmethod
    def _pump(proc: subprocess.Popen[str], lines: queue.Queue[str | None]) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _request(self, payload: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            proc = self._start()
            assert proc.stdin is not None
            try:
                proc.stdin.write(json.dumps(payload) + "\n")
                proc.stdin.flush()
            except OSError as exc:
                raise PlanningError(self.name, f"cannot write request: {exc}") from exc
            deadline = _calc_deadline(self._timeout)
            while True:
                try:
                    line = self._lines.get(timeout=_remaining(deadline))
                except queue.Empty:
                    self.close()
                    raise PlanningError(self.name, f"no reply within {self._timeout:g} s") from None
                if line is None:
                    raise PlanningError(self.name, "child process closed its output")
                if line.strip():
                    break
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PlanningError(self.name, f"reply is not JSON ({exc.msg})") from exc
        if not isinstance(reply, dict):
            raise PlanningError(self.name, "reply must be a JSON object")
        return reply

    def _payload(
        self, kind: str, summary: SceneSummary, history: Sequence[float] = (), stage: int | None = None
    ) -> dict[str, Any]:
        keypoints: list[KeypointDoc] = [
            {"label": label, "xyz": [float(v) for v in point]}
            for label, point in zip(summary.labels, summary.keypoints.points)
        ]
        dims: DimsDoc = {"T": summary.dims.T, "D": summary.dims.D, "n": summary.dims.n}
        doc: dict[str, Any] = {
            "type": kind,
            "instruction": self._instruction,
            "keypoints": keypoints,
            "dims": dims,
            "history": [float(r) for r in history],
        }
        if stage is not None:
            doc["stage"] = stage
        return doc

    def _program(self, reply: dict[str, Any], dims: RewardDims) -> RewardProgram:
        text = reply.get("program")
        if not isinstance(text, str):
            raise PlanningError(self.name, "reply has no 'program' text")
        try:
            return parse_reward(text, dims)
        except RewardSyntaxError as exc:
            raise PlanningError(self.name, f"invalid reward program: {exc}") from exc

    def _reply(self, reply: dict[str, Any], dims: RewardDims) -> PlannerReply:
        if "program" in reply:
            return PlannerReply("continue", self._program(reply, dims))
        action = reply.get("action", "continue")
        if action not in ("continue", "restart_stage", "abort"):
            raise PlanningError(self.name, f"unknown action {action!r}")
        stage = reply.get("stage")
        return PlannerReply(action, stage=int(stage) if stage is not None else None)

    def plan(self, summary: SceneSummary, instruction: str) -> RewardProgram:
        self._instruction = instruction
        return self._program(self._request(self._payload("plan", summary)), summary.dims)

    def next_stage(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply:
        return self._reply(self._request(self._payload("next_stage", summary, history, stage)), summary.dims)

    def recover(
        self, program: RewardProgram, stage: int, summary: SceneSummary, history: Sequence[float]
    ) -> PlannerReply:
        return self._reply(self._request(self._payload("recover", summary, history, stage)), summary.dims)

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.stdin is not None:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


def _calc_deadline(timeout: float | None) -> float | None:
    if timeout is None:
        return None
    return time.monotonic() + timeout


def _remaining(deadline: float | None) -> float | None:
    if deadline is None:
        return None
    return max(0.0, deadline - time.monotonic())


def create_planner(
    kind: str = "scripted",
    command: Sequence[str] | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> StagePlanner:
    if kind == "scripted":
        return ScriptedPlanner()
    if kind == "external":
        if not command:
            raise ValueError("Invalid planner command: None. Expected a non-empty argument list.")
        return ExternalPlanner(command, timeout=timeout)
    raise ValueError(f"Invalid planner: {kind!r}. Expected 'scripted' or 'external'.")


def plan_stages(planner: StagePlanner, summary: SceneSummary, instruction: str) -> RewardProgram:
    program = planner.plan(summary, instruction)
    if program.dims != summary.dims:
        raise PlanningError(planner.name, f"program dims {program.dims} differ from scene dims {summary.dims}")
    logger.debug(
        "%s planner produced %d stage(s): %s",
        planner.name, program.stage_count, ", ".join(s.name for s in program.stages),
    )
    return program
