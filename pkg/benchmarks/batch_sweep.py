"""Batch-size sweep: success rate and wall clock of full steering as B grows."""
from __future__ import annotations

import argparse
import gc
import sys
import time
from datetime import datetime
from pathlib import Path

from steerkit import GuidanceConfig, PerturbationSpec, RunConfig, make_task, run_suite
from steerkit._tasks import NO_PERTURBATION


def _measure(config: RunConfig, jobs: int) -> tuple[float, float, float, int]:
    """Run one suite; return (success_rate, std_error, elapsed_sec, episodes)."""
    gc.collect()
    t0 = time.perf_counter()
    summary = run_suite(config, jobs=jobs, write=False).summary
    elapsed = time.perf_counter() - t0
    n = sum(r["episodes"] for r in summary)
    rate = sum(r["successes"] for r in summary) / n if n else 0.0
    return rate, (rate * (1.0 - rate) / n) ** 0.5 if n else 0.0, elapsed, n


def sweep(args: argparse.Namespace) -> list[tuple[int, float, float, float, int]]:
    perts = (NO_PERTURBATION, PerturbationSpec("position_shift", "shift", {"delta": args.shift}, seed=args.seed))
    rows = []
    for b in args.batches:
        config = RunConfig(
            tasks=tuple((family, make_task(family)) for family in args.tasks),
            perturbations=perts,
            variants=("full",),
            guidance=GuidanceConfig(batch_size=b, mcmc_step_scale=args.mcmc_step_scale),
            episodes=args.episodes,
            max_chunks=args.max_chunks,
            root_seed=args.seed,
            backend=args.backend,
        )
        rate, se, elapsed, n = _measure(config, args.jobs)
        rows.append((b, rate, se, elapsed, n))
        print(f"  B={b:<3d} SR={rate * 100:5.1f}% SE={se * 100:4.1f} wall={elapsed:7.1f}s", file=sys.stderr)
    return rows


def _markdown(rows: list[tuple[int, float, float, float, int]], args: argparse.Namespace) -> str:
    lines = [
        "# Batch-Size Sweep",
        "",
        f"- generated_at: `{datetime.now().isoformat(timespec='seconds')}`",
        f"- tasks: `{', '.join(args.tasks)}`",
        f"- episodes per cell: `{args.episodes}`",
        f"- shift delta: `{args.shift}`",
        f"- backend: `{args.backend}`",
        "",
        "| B | N | SR | SE | wall(s) |",
        "|---:|---:|---:|---:|---:|",
    ]
    for b, rate, se, elapsed, n in rows:
        lines.append(f"| {b} | {n} | {rate * 100:.1f}% | {se * 100:.1f} | {elapsed:.1f} |")
    lines.append("")
    return "\n".join(lines)


def main() -> None:
    parser = argparse.ArgumentParser(description="Sweep the particle batch size of full steering")
    parser.add_argument("--batches", nargs="+", type=int, default=[4, 8, 16, 32])
    parser.add_argument("--tasks", nargs="+", default=["move_cube_to_zone", "open_drawer"])
    parser.add_argument("--episodes", type=int, default=20)
    parser.add_argument("--max-chunks", type=int, default=20)
    parser.add_argument("--shift", type=float, default=0.15)
    parser.add_argument("--mcmc-step-scale", type=float, default=0.005)
    parser.add_argument("--backend", choices=["diffusion", "flow"], default="diffusion")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--save-md", default="", help="Save markdown report path (or 'auto')")
    args = parser.parse_args()

    rows = sweep(args)
    md = _markdown(rows, args)
    print(md)
    if args.save_md:
        if args.save_md == "auto":
            ts = datetime.now().strftime("%Y%m%d_%H%M%S")
            path = Path("benchmarks") / "results" / f"batch_sweep_{ts}.md"
        else:
            path = Path(args.save_md)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(md, encoding="utf-8")
        print(f"Saved markdown report: {path}", file=sys.stderr)


if __name__ == "__main__":
    main()
