import csv
import io
import json
import math

import pytest

from steerkit._bench import (
    EPISODE_FIELDS,
    SUMMARY_FIELDS,
    VARIANTS,
    EpisodeResult,
    RunConfig,
    fit_task_policy,
    format_summary,
    load_run_config,
    plan_jobs,
    run_episode,
    run_suite,
    summarize_results,
    variant_guidance,
    write_results_csv,
    write_summary_csv,
)
from steerkit._exceptions import ConfigError, SceneValidationError
from steerkit._guidance import GuidanceConfig
from steerkit._tasks import NO_PERTURBATION, PerturbationSpec, make_task
from tests.helpers.configs import tiny_config


def _result(task="move", pert="none", variant="full", success=True, chunks=2, score=None, episode_id=0):
    return EpisodeResult(
        episode_id=episode_id, task=task, perturbation=pert, variant=variant, seed=episode_id,
        success=success, chunks=chunks, final_stage=1, mean_lambda=0.5, wall_ms=0,
        reason="success" if success else "budget",
        score=(1.0 if success else 0.0) if score is None else score,
    )


# ---------------------------------------------------------------------------
# variants and configuration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "variant, expected",
    [
        ("full", (True, True, True)),
        ("unguided", (True, True, True)),
        ("no_grad", (False, True, True)),
        ("no_fk", (True, True, False)),
        ("no_rbf", (True, False, True)),
        ("grad_only", (True, False, False)),
    ],
)
def test_variant_guidance_switches(variant, expected):
    g = variant_guidance(GuidanceConfig(), variant)
    assert (g.use_gradient, g.use_rbf, g.use_fk) == expected


def test_variant_guidance_rejects_unknown():
    with pytest.raises(ConfigError, match="variant"):
        variant_guidance(GuidanceConfig(), "turbo")


def test_variants_constant_matches_ablations():
    assert VARIANTS[0] == "unguided"
    assert set(VARIANTS) == {"unguided", "full", "no_grad", "no_fk", "no_rbf", "grad_only"}


@pytest.mark.parametrize(
    "overrides",
    [
        {"tasks": ()},
        {"episodes": -1},
        {"max_chunks": -1},
        {"horizon": 0},
        {"variants": ("full", "fast")},
        {"backend": "vae"},
        {"planner": "oracle"},
        {"planner": "external"},
        {"perturbations": (NO_PERTURBATION, PerturbationSpec(kind="distractor_insert", name="none"))},
    ],
)
def test_run_config_validation(tmp_path, overrides):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, **overrides)


def test_from_mapping_builds_tasks_and_perturbations(tmp_path):
    doc = {
        "tasks": [{"name": "blue", "instruction": "move the blue cube to the yellow zone"}, {"name": "drawer", "family": "open_drawer"}],
        "perturbations": [{"kind": "distractor_insert", "count": 2, "name": "two"}],
        "variants": ["unguided", "full"],
        "guidance": {"batch_size": 8},
        "controller": {"lambda_max": 2.0},
        "out_dir": "out",
        "episodes": 3,
    }
    config = RunConfig.from_mapping(doc, base_dir=tmp_path)
    assert [label for label, _ in config.tasks] == ["blue", "drawer"]
    assert config.tasks[0][1].predicate.zone == "yellow_zone"
    assert [p.label for p in config.perturbations] == ["none", "two"]
    assert config.variants == ("unguided", "full")
    assert config.guidance.batch_size == 8
    assert config.controller.lambda_max == 2.0
    assert config.out_dir == tmp_path / "out"
    assert config.episodes == 3


def test_from_mapping_warns_on_unknown_keys(tmp_path):
    with pytest.warns(RuntimeWarning, match="colour"):
        RunConfig.from_mapping({"tasks": ["open_drawer"], "colour": "red"}, base_dir=tmp_path)


def test_from_mapping_rejects_bad_controller(tmp_path):
    with pytest.raises(ConfigError, match="controller"):
        RunConfig.from_mapping({"tasks": ["open_drawer"], "controller": {"gain": 1}}, base_dir=tmp_path)


def test_from_mapping_rejects_bad_perturbation(tmp_path):
    with pytest.raises(SceneValidationError):
        RunConfig.from_mapping({"tasks": ["open_drawer"], "perturbations": [{"kind": "gravity"}]})


def test_load_run_config(tmp_path):
    path = tmp_path / "suite.json"
    path.write_text(json.dumps({"tasks": ["press_button"], "episodes": 1}), encoding="utf-8")
    config = load_run_config(path)
    assert config.episodes == 1
    assert config.tasks[0][0] == "press_button"


@pytest.mark.parametrize("text", ["{", "[1, 2]"])
def test_load_run_config_errors(tmp_path, text):
    path = tmp_path / "suite.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError, match="run config"):
        load_run_config(path)


def test_to_mapping_round_trips_through_from_mapping(tmp_path):
    config = tiny_config(tmp_path, perturbations=(NO_PERTURBATION, PerturbationSpec("distractor_insert", "d", {"count": 1})))
    again = RunConfig.from_mapping(json.loads(json.dumps(config.to_mapping())), base_dir=tmp_path)
    assert again.to_mapping() == config.to_mapping()


# ---------------------------------------------------------------------------
# job planning
# ---------------------------------------------------------------------------


def test_plan_jobs_cross_product_and_seeds(tmp_path):
    config = tiny_config(
        tmp_path,
        tasks=(("a", make_task("open_drawer")), ("b", make_task("press_button"))),
        variants=("unguided", "full"),
        episodes=3,
        root_seed=10,
    )
    jobs = plan_jobs(config)
    assert len(jobs) == 2 * 1 * 2 * 3
    assert [j.episode_id for j in jobs] == list(range(12))
    assert [j.seed for j in jobs[:3]] == [10, 11, 12]
    assert [(j.label, j.variant) for j in jobs[::3]] == [
        ("a", "unguided"), ("a", "full"), ("b", "unguided"), ("b", "full"),
    ]


def test_zero_episodes_plans_nothing(tmp_path):
    config = tiny_config(tmp_path, episodes=0)
    suite = run_suite(config, write=False)
    assert plan_jobs(config) == []
    assert suite.episodes == [] and suite.summary == []


# ---------------------------------------------------------------------------
# summaries and CSV
# ---------------------------------------------------------------------------


def test_summarize_results_rate_and_standard_error():
    results = [_result(success=s, episode_id=i) for i, s in enumerate([True, True, False, True])]
    (row,) = summarize_results(results)
    assert row["episodes"] == 4
    assert row["successes"] == 3
    assert row["success_rate"] == 0.75
    assert math.isclose(row["std_error"], math.sqrt(0.75 * 0.25 / 4))
    assert row["mean_score"] == 0.75


def test_summarize_results_keeps_first_seen_order():
    results = [_result(variant="full"), _result(variant="unguided"), _result(variant="full")]
    rows = summarize_results(results)
    assert [r["variant"] for r in rows] == ["full", "unguided"]
    assert rows[0]["episodes"] == 2


def test_summary_with_engaged_partial_score():
    rows = summarize_results([_result(success=False, score=0.5), _result(success=False)])
    assert rows[0]["success_rate"] == 0.0
    assert rows[0]["std_error"] == 0.0
    assert rows[0]["mean_score"] == 0.25


def test_results_csv_format():
    buf = io.StringIO()
    write_results_csv([_result().row()], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(EPISODE_FIELDS)
    record = next(csv.DictReader(io.StringIO(buf.getvalue())))
    assert record["success"] == "1"
    assert record["mean_lambda"] == "0.500000"


def test_summary_csv_to_path(tmp_path):
    path = tmp_path / "summary.csv"
    write_summary_csv(summarize_results([_result()]), path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == ",".join(SUMMARY_FIELDS)
    assert "1.000000" in text


def test_format_summary_table():
    table = format_summary(summarize_results([_result(), _result(success=False)]))
    lines = table.splitlines()
    assert lines[0].startswith("| Task |")
    assert "50.0%" in lines[2]
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_policy(tmp_path_factory):
    config = tiny_config(tmp_path_factory.mktemp("policy"))
    label, task = config.tasks[0]
    return fit_task_policy(config, label, task)


def test_fit_task_policy_shape(tiny_policy):
    assert tiny_policy.horizon == 8
    assert tiny_policy.action_dim == 3
    assert tiny_policy.n_components == 2


def test_fit_task_policy_prefers_policy_file(tmp_path, tiny_policy):
    from steerkit._policy import save_policy

    path = tmp_path / "policy.json"
    save_policy(tiny_policy, path)
    config = tiny_config(tmp_path, policy_files={"move": path}, backend="flow")
    loaded = fit_task_policy(config, "move", config.tasks[0][1])
    assert loaded.backend == "flow"
    assert loaded.n_components == tiny_policy.n_components


@pytest.mark.parametrize("variant", ["unguided", "full"])
def test_run_episode_respects_budget(tmp_path, tiny_policy, variant):
    config = tiny_config(tmp_path)
    label, task = config.tasks[0]
    result = run_episode(config, task, NO_PERTURBATION, variant, 3, policy=tiny_policy, label=label)
    assert result.chunks <= config.max_chunks
    assert result.reason in ("success", "complete", "budget", "abort")
    if result.reason == "budget":
        assert result.chunks == config.max_chunks
    if result.reason != "abort":
        assert result.success == (result.reason == "success")
    assert len(result.trace) == result.chunks
    assert result.path.shape == (result.chunks * config.horizon, 2)
    assert len(result.path_stages) == result.chunks * config.horizon
    assert result.wall_ms == 0
    if variant == "unguided":
        assert result.mean_lambda == 0.0


def test_run_episode_is_deterministic(tmp_path, tiny_policy):
    config = tiny_config(tmp_path)
    label, task = config.tasks[0]
    a = run_episode(config, task, NO_PERTURBATION, "full", 7, policy=tiny_policy, label=label)
    b = run_episode(config, task, NO_PERTURBATION, "full", 7, policy=tiny_policy, label=label)
    assert a.row() == b.row()
    assert a.trace == b.trace


def test_zero_budget_episode_executes_nothing(tmp_path, tiny_policy):
    config = tiny_config(tmp_path, max_chunks=0)
    label, task = config.tasks[0]
    result = run_episode(config, task, NO_PERTURBATION, "full", 0, policy=tiny_policy, label=label)
    assert result.chunks == 0
    assert result.reason == "budget"
    assert not result.success
    assert result.path.shape == (0, 2)


def test_failed_perturbation_becomes_reason(tmp_path, tiny_policy):
    config = tiny_config(tmp_path)
    label, task = config.tasks[0]
    crowd = PerturbationSpec("distractor_insert", "crowd", {"count": 500})
    result = run_episode(config, task, crowd, "full", 0, policy=tiny_policy, label=label)
    assert result.reason == "perturbation"
    assert result.chunks == 0
    assert result.initial_scene is None


def test_timing_records_wall_clock(tmp_path, tiny_policy):
    config = tiny_config(tmp_path, timing=True, max_chunks=1)
    label, task = config.tasks[0]
    result = run_episode(config, task, NO_PERTURBATION, "full", 0, policy=tiny_policy, label=label)
    assert result.wall_ms >= 0
    assert result.row()["wall_ms"] == result.wall_ms


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def test_run_suite_writes_csv(tmp_path):
    config = tiny_config(tmp_path, max_chunks=2)
    suite = run_suite(config)
    assert suite.csv_path == config.out_dir / "episodes.csv"
    rows = list(csv.DictReader(suite.csv_path.open(encoding="utf-8")))
    assert [int(r["episode_id"]) for r in rows] == [0, 1]
    assert len(suite.summary) == 1
    assert suite.summary_path.exists()


def test_run_suite_rejects_bad_jobs(tmp_path):
    with pytest.raises(ConfigError, match="jobs"):
        run_suite(tiny_config(tmp_path), jobs=0)


@pytest.mark.timeout(300)
def test_run_suite_rows_independent_of_jobs(tmp_path):
    config = tiny_config(tmp_path, max_chunks=2, variants=("unguided", "full"))
    serial = run_suite(config, jobs=1, write=False)
    parallel = run_suite(config, jobs=2, write=False)
    assert [r.row() for r in serial.episodes] == [r.row() for r in parallel.episodes]
    assert serial.summary == parallel.summary
