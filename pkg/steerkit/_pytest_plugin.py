"""pytest fixture plugin.

Usage::

    # conftest.py
    pytest_plugins = ["steerkit._pytest_plugin"]

This makes the ``rng``, ``move_task``, ``scene``, ``dims``, ``keypoints`` and
``small_policy`` fixtures available::

    def test_something(scene, move_task):
        assert not check_success(scene, move_task)
"""

import numpy as np
import pytest

from ._policy import GaussianMixturePolicy, build_noise_schedule
from ._reward_ast import KeypointSet, RewardDims
from ._tasks import TaskSpec, ground_keypoints, make_task, nominal_scene
from ._world import Scene


@pytest.fixture
def rng() -> np.random.Generator:
    """A fixed-seed generator, fresh per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def move_task() -> TaskSpec:
    """"move the red cube to the green zone"."""
    return make_task("move_cube_to_zone", "red", "green")


@pytest.fixture
def scene(move_task: TaskSpec) -> Scene:
    """The nominal tabletop layout."""
    return nominal_scene(move_task)


@pytest.fixture
def dims() -> RewardDims:
    """Default program dims: T=8, D=3 (two positions and a gripper channel), n=2 keypoints."""
    return RewardDims(T=8, D=3, n=2)


@pytest.fixture
def keypoints(scene: Scene, move_task: TaskSpec) -> KeypointSet:
    """Oracle keypoints of the nominal move task: the red cube, then the green zone."""
    return ground_keypoints(scene, move_task)


@pytest.fixture
def small_policy() -> GaussianMixturePolicy:
    """A two-component diffusion policy over 8 x 3 chunks with a short schedule."""
    size = 8 * 3
    means = np.stack([np.full(size, 0.05), np.full(size, -0.05)])
    return GaussianMixturePolicy(
        weights=np.array([0.5, 0.5]),
        means=means,
        variances=np.full((2, size), 0.01),
        horizon=8,
        action_dim=3,
        condition_key="small",
        schedule=build_noise_schedule(8),
    )
