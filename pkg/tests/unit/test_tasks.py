from dataclasses import replace

import numpy as np
import pytest

from steerkit._exceptions import GroundingError, PerturbationError, SceneValidationError
from steerkit._tasks import (
    FAMILIES,
    NO_PERTURBATION,
    PerturbationSpec,
    apply_perturbation,
    check_success,
    ground_keypoints,
    load_task,
    make_task,
    nominal_scene,
    parse_instruction,
    target_engaged,
)
from steerkit._world import _dist, step_env


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_has_a_grounded_nominal_scene(family):
    task = make_task(family)
    scene = nominal_scene(task)
    kps = ground_keypoints(scene, task)
    assert len(kps) == 2
    assert kps.labels[0] == task.target
    assert not check_success(scene, task)


def test_parse_instruction_variants():
    task = parse_instruction("Move the blue cube to the yellow zone")
    assert task.predicate.subject == "blue_cube"
    assert task.predicate.zone == "yellow_zone"
    assert parse_instruction("open the drawer").family == "open_drawer"
    assert parse_instruction("toggle the switch").predicate.subject == "switch"
    assert parse_instruction("fly to the moon") is None


def test_make_task_rejects_unknown_family():
    with pytest.raises(SceneValidationError):
        make_task("juggle")


def test_load_task_from_documents():
    assert load_task({"instruction": "press the button"}).family == "press_button"
    assert load_task({"family": "move_cube_to_zone", "color": "green", "zone": "yellow"}).target == "green_cube"
    with pytest.raises(SceneValidationError):
        load_task({"instruction": "dance"})
    with pytest.raises(SceneValidationError):
        load_task({})


def test_nominal_scene_jitter_moves_cubes():
    task = make_task("move_cube_to_zone")
    base = nominal_scene(task)
    jittered = nominal_scene(task, np.random.default_rng(0), 0.05)
    for a, b in zip(base.objects, jittered.objects):
        assert 0.0 < _dist(a.position, b.position) <= 0.05 * np.sqrt(2)


def test_close_drawer_starts_open():
    scene = nominal_scene(make_task("close_drawer"))
    assert scene.find_label("drawer").joint == 1.0


def test_move_task_success_predicate(move_task, scene):
    zone = scene.find_label("green_zone")
    cube = scene.find_label("red_cube")
    moved = replace(
        scene, objects=tuple(replace(o, position=zone.center) if o is cube else o for o in scene.objects)
    )
    assert check_success(moved, move_task)
    inside = (zone.center[0] + 0.9 * zone.radius, zone.center[1])
    near_edge = replace(
        scene, objects=tuple(replace(o, position=inside) if o is cube else o for o in scene.objects)
    )
    assert check_success(near_edge, move_task)


def test_part_task_success_predicate():
    task = make_task("open_drawer")
    scene = nominal_scene(task)
    opened = replace(scene, parts=tuple(replace(p, joint=0.85) if p.label == "drawer" else p for p in scene.parts))
    assert check_success(opened, task)


def test_keypoints_follow_scene(move_task, scene):
    kps = ground_keypoints(scene, move_task)
    assert kps.labels == ("red_cube", "green_zone")
    assert kps.points[0].tolist() == list(scene.find_label("red_cube").position)
    assert kps.points[1].tolist() == list(scene.find_label("green_zone").center)


def test_part_keypoints_include_goal_position():
    task = make_task("open_drawer")
    kps = ground_keypoints(nominal_scene(task), task)
    assert kps.labels == ("drawer", "drawer_goal")
    assert kps.points[1] == pytest.approx([0.15, 0.65])


def test_grounding_missing_label(scene):
    with pytest.raises(GroundingError):
        ground_keypoints(scene, make_task("move_cube_to_zone", "purple"))


def test_target_engaged_tracks_contacts(move_task, scene):
    assert not target_engaged(scene, move_task)
    cube = scene.find_label("red_cube")
    near = replace(scene, gripper=replace(scene.gripper, position=cube.position))
    assert target_engaged(step_env(near, [0.0, 0.0, 1.0]), move_task)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def test_no_perturbation_is_identity(move_task, scene):
    assert apply_perturbation(scene, move_task, NO_PERTURBATION) == (scene, move_task)


def test_position_shift_zero_is_identity(move_task, scene):
    spec = PerturbationSpec("position_shift", params={"delta": 0.0})
    assert apply_perturbation(scene, move_task, spec)[0] == scene


def test_position_shift_bounded_and_reproducible(move_task, scene):
    spec = PerturbationSpec("position_shift", params={"delta": 0.2}, seed=3)
    a, _ = apply_perturbation(scene, move_task, spec)
    b, _ = apply_perturbation(scene, move_task, spec)
    assert a == b
    before = np.asarray(scene.find_label("red_cube").position)
    after = np.asarray(a.find_label("red_cube").position)
    assert np.all(np.abs(after - before) <= 0.2)
    assert not np.allclose(after, before)


def test_position_shift_moves_part_base():
    task = make_task("open_drawer")
    scene = nominal_scene(task)
    spec = PerturbationSpec("position_shift", params={"delta": 0.05})
    shifted, _ = apply_perturbation(scene, task, spec, np.random.default_rng(0))
    part = shifted.find_label("drawer")
    assert part.base != scene.find_label("drawer").base
    for end in (part.handle_at(0.0), part.handle_at(1.0)):
        assert all(0.0 <= v <= 1.0 for v in end)


def test_object_substitute_renames_target(move_task, scene):
    spec = PerturbationSpec("object_substitute", params={"old": "red_cube", "new": "red_block"})
    out, task = apply_perturbation(scene, move_task, spec)
    assert out.find_label("red_block") is not None
    assert out.find_label("red_cube") is None
    assert task.target == "red_block"
    assert task.instruction == "move the red block to the green zone"
    assert ground_keypoints(out, task).labels[0] == "red_block"


def test_object_substitute_rejects_existing_label(move_task, scene):
    spec = PerturbationSpec("object_substitute", params={"old": "red_cube", "new": "blue_cube"})
    with pytest.raises(PerturbationError):
        apply_perturbation(scene, move_task, spec)


def test_distractor_insert_adds_separated_objects(move_task, scene):
    spec = PerturbationSpec("distractor_insert", params={"count": 3})
    out, _ = apply_perturbation(scene, move_task, spec, np.random.default_rng(4))
    added = [o for o in out.objects if o.id.startswith("distractor_")]
    assert [o.id for o in added] == ["distractor_1", "distractor_2", "distractor_3"]
    for obj in added:
        for other in out.objects:
            if other.id != obj.id:
                assert _dist(obj.position, other.position) >= 0.08


def test_distractor_insert_fails_when_workspace_full(move_task, scene):
    spec = PerturbationSpec("distractor_insert", params={"count": 500})
    with pytest.raises(PerturbationError) as exc_info:
        apply_perturbation(scene, move_task, spec, np.random.default_rng(0))
    assert exc_info.value.attempts == 100


def test_instruction_change(move_task, scene):
    spec = PerturbationSpec("instruction_change", params={"color": "blue", "zone": "yellow"})
    out, task = apply_perturbation(scene, move_task, spec)
    assert out == scene
    assert task.instruction == "move the blue cube to the yellow zone"
    spec = PerturbationSpec("instruction_change", params={"instruction": "open the drawer"})
    assert apply_perturbation(scene, move_task, spec)[1].family == "open_drawer"


def test_instruction_change_retargets_articulated_task():
    drawer = make_task("open_drawer")
    scene = nominal_scene(drawer)
    retarget = PerturbationSpec("instruction_change", params={"color": "blue", "zone": "yellow"})
    out, task = apply_perturbation(scene, drawer, retarget)
    assert out == scene
    assert task.family == "press_button"
    assert not check_success(out, task)
    ground_keypoints(out, task)

    to_switch = PerturbationSpec("instruction_change", params={"part": "switch"})
    assert apply_perturbation(scene, drawer, to_switch)[1].family == "toggle_switch"

    open_drawer_scene = nominal_scene(make_task("close_drawer"))
    back_to_drawer = PerturbationSpec("instruction_change", params={"part": "drawer"})
    task = apply_perturbation(open_drawer_scene, make_task("press_button"), back_to_drawer)[1]
    assert task.family == "close_drawer"
    assert not check_success(open_drawer_scene, task)


def test_instruction_change_to_missing_part_is_grounding_error():
    drawer = make_task("open_drawer")
    spec = PerturbationSpec("instruction_change", params={"part": "door"})
    with pytest.raises(GroundingError):
        apply_perturbation(nominal_scene(drawer), drawer, spec)


def test_scene_jitter_moves_parts_too():
    task = make_task("open_drawer")
    nominal = nominal_scene(task)
    jittered = nominal_scene(task, np.random.default_rng(0), jitter=0.05)
    for before, after in zip(nominal.parts, jittered.parts):
        offset = np.abs(np.asarray(after.base) - np.asarray(before.base))
        assert np.all(offset <= 0.05) and np.any(offset > 0.0)


def test_position_swap_exchanges_target(move_task, scene):
    spec = PerturbationSpec("position_swap")
    out, _ = apply_perturbation(scene, move_task, spec)
    red = scene.find_label("red_cube").position
    green = scene.find_label("green_cube").position
    assert out.find_label("red_cube").position == green
    assert out.find_label("green_cube").position == red


def test_perturbation_spec_from_mapping():
    spec = PerturbationSpec.from_mapping({"kind": "position_shift", "name": "shift10", "delta": 0.1, "seed": 2})
    assert spec.label == "shift10"
    assert spec.params == {"delta": 0.1}
    assert PerturbationSpec.from_mapping(spec.to_mapping()) == spec
    with pytest.raises(SceneValidationError):
        PerturbationSpec.from_mapping({"kind": "melt"})
    with pytest.raises(SceneValidationError):
        PerturbationSpec.from_mapping({"kind": "position_shift", "delta": 0.9})
    with pytest.raises(SceneValidationError):
        PerturbationSpec.from_mapping({"kind": "object_substitute", "old": "x"})
