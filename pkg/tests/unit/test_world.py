import json

import numpy as np
import pytest

from steerkit._exceptions import ConfigError, SceneValidationError
from steerkit._world import (
    STEP_CLAMP,
    ArticulatedPart,
    Gripper,
    Scene,
    SceneObject,
    execute_chunk,
    load_scene,
    read_scene,
    rollout_chunk,
    save_scene,
    step_env,
    write_scene,
)


@pytest.fixture
def tiny():
    return Scene(
        gripper=Gripper(position=(0.5, 0.5)),
        objects=(SceneObject("c", "cube", (0.52, 0.5)), SceneObject("w", "wall", (0.9, 0.9), movable=False)),
        parts=(ArticulatedPart("d", "drawer", 0.0, (0.0, -1.0), 0.2, (0.2, 0.8)),),
    )


def test_step_clamps_motion(tiny):
    out = step_env(tiny, [1.0, -1.0, 0.0])
    assert out.gripper.position == pytest.approx((0.5 + STEP_CLAMP, 0.5 - STEP_CLAMP))


def test_step_stays_inside_workspace():
    scene = Scene(gripper=Gripper(position=(0.98, 0.02)))
    out = step_env(scene, [0.1, -0.1, 0.0])
    assert out.gripper.position == (1.0, 0.0)


def test_grasp_within_radius_and_carry(tiny):
    held = step_env(tiny, [0.0, 0.0, 1.0])
    assert held.gripper.closed and held.gripper.held == "c"
    assert held.contacts == ("c",)
    moved = step_env(held, [0.0, 0.1, 1.0])
    assert moved.object("c").position == pytest.approx((0.52, 0.6))
    released = step_env(moved, [0.0, 0.0, -1.0])
    assert released.gripper.held is None and not released.gripper.closed
    assert released.object("c").position == pytest.approx((0.52, 0.6))


def test_grasp_outside_radius_closes_empty(tiny):
    far = step_env(tiny, [-0.1, 0.0, 1.0])
    assert far.gripper.closed and far.gripper.held is None
    assert far.contacts == ()


def test_fixed_objects_cannot_be_grasped():
    scene = Scene(gripper=Gripper(position=(0.9, 0.9)), objects=(SceneObject("w", "wall", (0.9, 0.9), movable=False),))
    assert step_env(scene, [0.0, 0.0, 1.0]).gripper.held is None


def test_gripper_dead_band_keeps_state(tiny):
    held = step_env(tiny, [0.0, 0.0, 1.0])
    assert step_env(held, [0.0, 0.0, 0.2]).gripper.held == "c"


def test_handle_moves_with_gripper(tiny):
    scene = Scene(gripper=Gripper(position=(0.2, 0.8)), parts=tiny.parts)
    out = step_env(scene, [0.0, -0.1, -1.0])
    part = out.parts[0]
    assert part.joint == pytest.approx(0.5)
    assert part.handle == pytest.approx((0.2, 0.7))
    assert out.contacts == ("d",)
    out = execute_chunk(out, [[0.0, -0.1, -1.0]] * 3)
    assert out.parts[0].joint == 1.0


def test_handle_ignores_distant_gripper(tiny):
    out = step_env(tiny, [0.0, -0.1, 0.0])
    assert out.parts[0].joint == 0.0


def test_step_rejects_bad_actions(tiny):
    with pytest.raises(ConfigError):
        step_env(tiny, [0.0, 0.0])
    with pytest.raises(ConfigError):
        step_env(tiny, [0.0, np.nan, 0.0])


def test_step_is_pure(tiny):
    step_env(tiny, [0.1, 0.1, 1.0])
    assert tiny.gripper.position == (0.5, 0.5)


def test_rollout_chunk_returns_path(tiny):
    scene, path = rollout_chunk(tiny, [[0.1, 0.0, 0.0], [0.1, 0.0, 0.0]])
    assert path.shape == (2, 2)
    assert path[-1] == pytest.approx(scene.gripper.position)


def test_three_dimensional_workspace():
    scene = Scene(gripper=Gripper(position=(0.5, 0.5, 0.5)), lower=(0.0, 0.0, 0.0), upper=(1.0, 1.0, 1.0))
    out = step_env(scene, [0.0, 0.0, 0.05, 0.0])
    assert out.gripper.position == pytest.approx((0.5, 0.5, 0.55))


def test_scene_document_preserves_state(tiny, tmp_path):
    held = step_env(tiny, [0.0, 0.0, 1.0])
    assert load_scene(save_scene(held)) == held
    path = tmp_path / "scene.json"
    write_scene(held, path)
    assert read_scene(path) == held


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda d: d["objects"][0].update(position=[1.5, 0.5]), "$.objects[0].position"),
        (lambda d: d["objects"][0].pop("label"), "$.objects[0].label"),
        (lambda d: d["parts"][0].update(joint=2.0), "$.parts[0].joint"),
        (lambda d: d["parts"][0].update(travel=0.9), "$.parts[0].travel"),
        (lambda d: d["gripper"].update(held="ghost"), "$.gripper.held"),
        (lambda d: d["objects"].append(dict(d["objects"][0])), "$.objects"),
        (lambda d: d.update(zones=[{"label": "z", "center": [0.5, 0.5], "radius": 0}]), "$.zones[0].radius"),
        (lambda d: d.update(bounds=[0.0, 1.0]), "$.bounds"),
        (lambda d: d.update(bounds=[[0.0, "x"], [1.0, 1.0]]), "$.bounds"),
        (lambda d: d.update(bounds=[[0.0, None], [1.0, 1.0]]), "$.bounds"),
        (lambda d: d.update(bounds=[[0.0, 0.0], [1.0]]), "$.bounds"),
        (lambda d: d.update(bounds=[[1.0, 0.0], [0.0, 1.0]]), "$.bounds"),
    ],
)
def test_scene_validation_paths(tiny, mutate, where):
    doc = json.loads(json.dumps(save_scene(tiny)))
    mutate(doc)
    with pytest.raises(SceneValidationError) as exc_info:
        load_scene(doc)
    assert exc_info.value.path == where


def test_read_scene_rejects_invalid_json(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text("[", encoding="utf-8")
    with pytest.raises(SceneValidationError):
        read_scene(path)
