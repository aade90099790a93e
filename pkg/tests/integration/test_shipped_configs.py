"""The example documents under configs/ stay loadable."""
from pathlib import Path

import pytest

from steerkit._bench import load_run_config
from steerkit._reward_parser import load_reward

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_suite_configs_load(path):
    config = load_run_config(path)
    assert config.tasks
    assert config.out_dir.is_absolute()
    assert config.guidance.reward_on_clean_estimate and config.guidance.exact
    assert config.controller.lambda_max == 2.0


def test_reward_file_parses():
    program = load_reward(CONFIGS / "move_red_to_green.reward")
    assert [s.name for s in program.stages] == ["reach", "grasp", "place"]
    assert (program.dims.T, program.dims.D, program.dims.n) == (8, 3, 2)
