from dataclasses import replace

import pytest

from steerkit._exceptions import PlanningError
from steerkit._planner import (
    ExternalPlanner,
    PlannerReply,
    ScriptedPlanner,
    create_planner,
    plan_stages,
    summarize,
)
from steerkit._demos import expert_rollout
from steerkit._reward_eval import eval_reward
from steerkit._tasks import make_task, nominal_scene
from steerkit._world import step_env
from tests.helpers.planners import BAD_PROGRAM, GARBAGE, RESPONDER, SILENT, planner_command


@pytest.fixture
def script(tmp_path):
    def write(source, name="planner.py"):
        return planner_command(tmp_path, source, name)

    return write


# ---------------------------------------------------------------------------
# Scene summary
# ---------------------------------------------------------------------------


def test_summarize_reports_facts(move_task, scene):
    summary = summarize(scene, move_task, 8)
    assert summary.labels == ("red_cube", "green_zone")
    assert (summary.dims.T, summary.dims.D, summary.dims.n) == (8, 3, 2)
    assert summary.held is None
    assert summary.joints == {"drawer": 0.0, "button": 0.0, "switch": 0.0}
    assert not summary.success


# ---------------------------------------------------------------------------
# Scripted planner
# ---------------------------------------------------------------------------


def test_scripted_move_plan_has_three_stages(move_task, scene):
    summary = summarize(scene, move_task, 8)
    program = plan_stages(ScriptedPlanner(), summary, move_task.instruction)
    assert [s.name for s in program.stages] == ["reach", "grasp", "place"]
    assert "red cube" in program.stage(1).description
    assert all(s.high > s.low for s in program.stages)


@pytest.mark.parametrize("family", ["open_drawer", "close_drawer", "press_button", "toggle_switch"])
def test_scripted_part_plan_has_two_stages(family):
    task = make_task(family)
    summary = summarize(nominal_scene(task), task, 8)
    program = plan_stages(ScriptedPlanner(), summary, task.instruction)
    assert [s.name for s in program.stages] == ["reach", "actuate"]


def test_scripted_move_rewards_follow_the_whole_chunk(move_task, scene):
    import numpy as np

    summary = summarize(scene, move_task, 8)
    program = ScriptedPlanner().plan(summary, move_task.instruction)
    start = np.asarray(scene.gripper.position)
    demo, ok = expert_rollout(scene, move_task, 8, 0.0, np.random.default_rng(0))
    assert ok and len(demo) == 1
    for stage in (1, 2, 3):
        assert eval_reward(program, stage, demo[0], summary.keypoints, start) > program.stage(stage).high

    # Ending the chunk on the cube without carrying it away is not progress.
    target = np.asarray(scene.find_label("red_cube").position)
    to_cube = np.zeros((8, 3))
    to_cube[:, :2] = (target - start) / 8
    to_cube[-1, 2] = 1.0
    for stage in (1, 2):
        assert eval_reward(program, stage, to_cube, summary.keypoints, start) < program.stage(stage).high
    assert eval_reward(program, 1, np.zeros((8, 3)), summary.keypoints, start) < program.stage(1).low


def test_scripted_part_rewards_follow_the_whole_chunk():
    import numpy as np

    task = make_task("open_drawer")
    scene = nominal_scene(task)
    summary = summarize(scene, task, 8)
    program = ScriptedPlanner().plan(summary, task.instruction)
    start = np.asarray(scene.gripper.position)
    demo, ok = expert_rollout(scene, task, 8, 0.0, np.random.default_rng(0))
    assert ok
    for stage in (1, 2):
        assert eval_reward(program, stage, demo[0], summary.keypoints, start) > program.stage(stage).high
    assert eval_reward(program, 2, np.zeros((8, 3)), summary.keypoints, start) < program.stage(2).high


def test_scripted_planner_rejects_unknown_instruction(move_task, scene):
    with pytest.raises(PlanningError):
        ScriptedPlanner().plan(summarize(scene, move_task, 8), "juggle three cubes")


def test_scripted_grasp_postcondition(move_task, scene):
    planner = ScriptedPlanner()
    summary = summarize(scene, move_task, 8)
    program = planner.plan(summary, move_task.instruction)
    reply = planner.next_stage(program, 2, summary, [-0.1])
    assert reply == PlannerReply("restart_stage", stage=2)
    cube = scene.find_label("red_cube")
    held = step_env(replace(scene, gripper=replace(scene.gripper, position=cube.position)), [0, 0, 1])
    assert planner.next_stage(program, 2, summarize(held, move_task, 8), [-0.1]) == PlannerReply("continue")


def test_scripted_final_stage_requires_success(move_task, scene):
    planner = ScriptedPlanner()
    summary = summarize(scene, move_task, 8)
    program = planner.plan(summary, move_task.instruction)
    assert planner.next_stage(program, 1, summary, []).action == "continue"
    assert planner.next_stage(program, 3, summary, []).action == "restart_stage"
    done = replace(summary, success=True, held="red_cube")
    assert planner.next_stage(program, 3, done, []).action == "continue"


def test_scripted_recover_restarts(move_task, scene):
    planner = ScriptedPlanner()
    summary = summarize(scene, move_task, 8)
    program = planner.plan(summary, move_task.instruction)
    assert planner.recover(program, 1, summary, []) == PlannerReply("restart_stage", stage=1)
    assert planner.recover(program, 3, summary, []) == PlannerReply("restart_stage", stage=2)


def test_plan_stages_checks_dims(move_task, scene):
    class WrongDims(ScriptedPlanner):
        def plan(self, summary, instruction):
            return super().plan(replace(summary, dims=replace(summary.dims, T=4)), instruction)

    with pytest.raises(PlanningError, match="dims"):
        plan_stages(WrongDims(), summarize(scene, move_task, 8), move_task.instruction)


def test_create_planner():
    assert isinstance(create_planner("scripted"), ScriptedPlanner)
    with pytest.raises(ValueError):
        create_planner("external")
    with pytest.raises(ValueError):
        create_planner("oracle")


# ---------------------------------------------------------------------------
# External planner
# ---------------------------------------------------------------------------


def test_external_planner_round_trip(script, move_task, scene):
    planner = ExternalPlanner(script(RESPONDER), timeout=10.0)
    try:
        summary = summarize(scene, move_task, 8)
        program = plan_stages(planner, summary, move_task.instruction)
        assert [s.name for s in program.stages] == ["to_red_cube"]
        assert planner.next_stage(program, 1, summary, [-0.2]).action == "continue"
        assert planner.recover(program, 1, summary, [-0.2]).action == "abort"
    finally:
        planner.close()


def test_external_planner_timeout(script, move_task, scene):
    planner = ExternalPlanner(script(SILENT), timeout=0.5)
    try:
        with pytest.raises(PlanningError, match="no reply"):
            planner.plan(summarize(scene, move_task, 8), move_task.instruction)
    finally:
        planner.close()


def test_external_planner_rejects_garbage(script, move_task, scene):
    planner = ExternalPlanner(script(GARBAGE), timeout=5.0)
    try:
        with pytest.raises(PlanningError, match="not JSON"):
            planner.plan(summarize(scene, move_task, 8), move_task.instruction)
    finally:
        planner.close()


def test_external_planner_rejects_invalid_program(script, move_task, scene):
    planner = ExternalPlanner(script(BAD_PROGRAM), timeout=5.0)
    try:
        with pytest.raises(PlanningError, match="invalid reward program"):
            planner.plan(summarize(scene, move_task, 8), move_task.instruction)
    finally:
        planner.close()


def test_external_planner_missing_command(move_task, scene, tmp_path):
    planner = ExternalPlanner([str(tmp_path / "does-not-exist")], timeout=1.0)
    with pytest.raises(PlanningError, match="cannot start"):
        planner.plan(summarize(scene, move_task, 8), move_task.instruction)


def test_external_planner_rejects_bad_timeout():
    with pytest.raises(ValueError):
        ExternalPlanner(["true"], timeout=0)
