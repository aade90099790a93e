"""``steerkit`` console entry point."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from ._bench import format_summary, load_run_config, run_suite
from ._demos import generate_demos, load_demos, save_demos
from ._exceptions import SteerkitError
from ._gmm import DEFAULT_ITERS, fit_gmm_em
from ._oracles import ORACLES, run_oracles
from ._policy import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS, build_noise_schedule, save_policy
from ._tasks import FAMILIES, make_task

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.out:
        config = dataclasses.replace(config, out_dir=Path(args.out))
    if args.plot:
        config = dataclasses.replace(config, plot=True)
    result = run_suite(config, jobs=args.jobs)
    print(format_summary(result.summary))
    print(f"\nEpisodes: {result.csv_path}\nSummary:  {result.summary_path}")
    return EXIT_OK


def _cmd_demo_gen(args: argparse.Namespace) -> int:
    task = make_task(args.task, args.color, args.zone)
    demos = generate_demos(
        task, args.n, args.horizon, args.noise, np.random.default_rng(args.seed), scene_jitter=args.jitter
    )
    save_demos(demos, args.out, task=task)
    print(f"Wrote {len(demos)} demos ({sum(len(d) for d in demos)} chunks) to {args.out}")
    return EXIT_OK


def _cmd_fit_policy(args: argparse.Namespace) -> int:
    demos = load_demos(args.demos)
    policy = fit_gmm_em(
        demos,
        args.components,
        args.iters,
        np.random.default_rng(args.seed),
        condition_key=args.condition_key or Path(args.demos).stem,
        schedule=build_noise_schedule(args.steps, args.beta_min, args.beta_max),
        backend=args.backend,
    )
    save_policy(policy, args.out)
    print(f"Wrote {policy.n_components}-component {policy.backend} policy to {args.out}")
    return EXIT_OK


def _cmd_check(args: argparse.Namespace) -> int:
    results = run_oracles(quick=args.quick, names=args.only or None)
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steerkit", description="Reward-steered action-chunk sampling on a kinematic tabletop"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="Run a benchmark suite from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--plot", action="store_true", help="Write one SVG trajectory plot per cell")
    run.add_argument("--out", default="", help="Override the config's output directory")
    run.set_defaults(handler=_cmd_run)

    demo = sub.add_parser("demo-gen", parents=[common], help="Generate scripted demonstrations")
    demo.add_argument("--task", required=True, choices=list(FAMILIES))
    demo.add_argument("--n", type=int, required=True)
    demo.add_argument("--out", required=True)
    demo.add_argument("--noise", type=float, default=0.0)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--horizon", type=int, default=8)
    demo.add_argument("--jitter", type=float, default=0.0, help="Uniform cube displacement per demo")
    demo.add_argument("--color", default="red")
    demo.add_argument("--zone", default="green")
    demo.set_defaults(handler=_cmd_demo_gen)

    fit = sub.add_parser("fit-policy", parents=[common], help="Fit a mixture policy to demonstrations")
    fit.add_argument("--demos", required=True)
    fit.add_argument("--components", type=int, required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--iters", type=int, default=DEFAULT_ITERS)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--backend", choices=["diffusion", "flow"], default="diffusion")
    fit.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    fit.add_argument("--beta-min", type=float, default=DEFAULT_BETA_MIN)
    fit.add_argument("--beta-max", type=float, default=DEFAULT_BETA_MAX)
    fit.add_argument("--condition-key", default="")
    fit.set_defaults(handler=_cmd_fit_policy)

    check = sub.add_parser("check", parents=[common], help="Run the oracle self-checks")
    check.add_argument("--quick", action="store_true")
    check.add_argument("--only", nargs="*", choices=list(ORACLES), default=[])
    check.set_defaults(handler=_cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return int(args.handler(args))
    except (SteerkitError, ValueError, OSError) as exc:
        print(f"steerkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
