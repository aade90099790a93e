from ._bench import (
    EpisodeResult,
    RunConfig,
    SuiteResult,
    load_run_config,
    run_episode,
    run_suite,
    write_results_csv,
)
from ._control import (
    ControllerConfig,
    StageState,
    SwitchDecision,
    adaptive_lambda,
    schmitt_decide,
    step_controller,
)
from ._demos import generate_demos
from ._exceptions import (
    ConfigError,
    DemoGenerationError,
    DomainError,
    FitError,
    GroundingError,
    PerturbationError,
    PlanningError,
    PolicyDocumentError,
    RewardEvaluationError,
    RewardSyntaxError,
    SceneValidationError,
    SteerkitError,
)
from ._gmm import fit_gmm_em
from ._guidance import (
    GuidanceConfig,
    GuidanceResult,
    apply_diffusion_guidance,
    apply_flow_guidance,
    guided_denoise,
    mala_refine,
    mcmc_refine,
    rbf_repulsion_grad,
    repulsion_direction,
    write_diagnostics_csv,
)
from ._particles import ParticleBatch, ess, fk_resample, fk_weights
from ._planner import (
    ExternalPlanner,
    PlannerReply,
    SceneSummary,
    ScriptedPlanner,
    StagePlanner,
    create_planner,
    plan_stages,
    summarize,
)
from ._plot import plot_trajectories
from ._policy import (
    GaussianMixturePolicy,
    NoiseSchedule,
    build_noise_schedule,
    clean_estimate_vjp,
    denoise_step,
    epsilon_analytic,
    flow_kernel,
    flow_step,
    load_policy,
    marginal_log_prob_and_score,
    sample_unguided,
    save_policy,
    velocity_analytic,
)
from ._reward_ast import KeypointSet, RewardDims, RewardProgram, Stage, print_program
from ._reward_eval import check_grad, eval_reward, grad_reward
from ._reward_parser import load_reward, parse_reward
from ._tasks import (
    PerturbationSpec,
    TaskSpec,
    apply_perturbation,
    check_success,
    ground_keypoints,
    make_task,
    nominal_scene,
)
from ._world import Scene, execute_chunk, load_scene, save_scene, step_env

__all__ = [
    "ControllerConfig",
    "EpisodeResult",
    "ExternalPlanner",
    "GaussianMixturePolicy",
    "GuidanceConfig",
    "GuidanceResult",
    "KeypointSet",
    "NoiseSchedule",
    "ParticleBatch",
    "PerturbationSpec",
    "PlannerReply",
    "RewardDims",
    "RewardProgram",
    "RunConfig",
    "Scene",
    "SceneSummary",
    "ScriptedPlanner",
    "Stage",
    "StagePlanner",
    "StageState",
    "SuiteResult",
    "SwitchDecision",
    "TaskSpec",
    "SteerkitError",
    "ConfigError",
    "DomainError",
    "PolicyDocumentError",
    "FitError",
    "RewardSyntaxError",
    "RewardEvaluationError",
    "PlanningError",
    "GroundingError",
    "SceneValidationError",
    "PerturbationError",
    "DemoGenerationError",
    "adaptive_lambda",
    "apply_diffusion_guidance",
    "apply_flow_guidance",
    "apply_perturbation",
    "build_noise_schedule",
    "check_grad",
    "check_success",
    "clean_estimate_vjp",
    "create_planner",
    "denoise_step",
    "epsilon_analytic",
    "ess",
    "eval_reward",
    "execute_chunk",
    "fit_gmm_em",
    "fk_resample",
    "fk_weights",
    "flow_kernel",
    "flow_step",
    "generate_demos",
    "grad_reward",
    "ground_keypoints",
    "guided_denoise",
    "load_policy",
    "load_reward",
    "load_run_config",
    "load_scene",
    "make_task",
    "mala_refine",
    "marginal_log_prob_and_score",
    "mcmc_refine",
    "nominal_scene",
    "parse_reward",
    "plan_stages",
    "plot_trajectories",
    "print_program",
    "rbf_repulsion_grad",
    "repulsion_direction",
    "run_episode",
    "run_suite",
    "sample_unguided",
    "save_policy",
    "save_scene",
    "schmitt_decide",
    "step_controller",
    "step_env",
    "summarize",
    "velocity_analytic",
    "write_diagnostics_csv",
    "write_results_csv",
]
__version__ = "0.1.0"
