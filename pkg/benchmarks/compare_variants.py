"""Compare steering variants (unguided, full and the ablations) on one suite."""
from __future__ import annotations

import argparse
import dataclasses
import json
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from steerkit import GuidanceConfig, PerturbationSpec, RunConfig, make_task, run_suite
from steerkit._bench import VARIANTS
from steerkit._tasks import NO_PERTURBATION


@dataclass
class VariantResult:
    variant: str
    perturbation: str
    episodes: int
    success_rate: float
    std_error: float
    mean_score: float
    mean_chunks: float
    seconds: float


def _suite(args: argparse.Namespace) -> RunConfig:
    perts = [NO_PERTURBATION]
    if args.shift > 0.0:
        perts.append(PerturbationSpec("position_shift", "shift", {"delta": args.shift}, seed=args.seed))
    if args.retarget:
        perts.append(PerturbationSpec("instruction_change", "retarget", {"color": "blue", "zone": "yellow"}))
    return RunConfig(
        tasks=tuple((family, make_task(family)) for family in args.tasks),
        perturbations=tuple(perts),
        variants=tuple(args.variants),
        guidance=GuidanceConfig(batch_size=args.batch, mcmc_step_scale=args.mcmc_step_scale),
        episodes=args.episodes,
        max_chunks=args.max_chunks,
        root_seed=args.seed,
        backend=args.backend,
    )


def run_variants(args: argparse.Namespace) -> list[VariantResult]:
    base = _suite(args)
    results: list[VariantResult] = []
    for variant in args.variants:
        config = dataclasses.replace(base, variants=(variant,))
        started = time.perf_counter()
        suite = run_suite(config, jobs=args.jobs, write=False)
        elapsed = time.perf_counter() - started
        per_pert: dict[str, list] = {}
        for row in suite.summary:
            per_pert.setdefault(row["perturbation"], []).append(row)
        for pert, rows in per_pert.items():
            n = sum(r["episodes"] for r in rows)
            rate = sum(r["successes"] for r in rows) / n if n else 0.0
            results.append(
                VariantResult(
                    variant=variant,
                    perturbation=pert,
                    episodes=n,
                    success_rate=rate,
                    std_error=(rate * (1.0 - rate) / n) ** 0.5 if n else 0.0,
                    mean_score=sum(r["mean_score"] * r["episodes"] for r in rows) / n if n else 0.0,
                    mean_chunks=sum(r["mean_chunks"] * r["episodes"] for r in rows) / n if n else 0.0,
                    seconds=elapsed,
                )
            )
    return results


def print_table(results: list[VariantResult]) -> None:
    for line in _table_lines(results):
        print(line)


def _table_lines(results: list[VariantResult]) -> list[str]:
    lines = [
        "| Perturbation | Variant | N | SR | SE | Score | Chunks | wall(s) |",
        "|---|---|---:|---:|---:|---:|---:|---:|",
    ]
    for r in results:
        lines.append(
            f"| {r.perturbation} | {r.variant} | {r.episodes} | {r.success_rate * 100:.1f}% |"
            f" {r.std_error * 100:.1f} | {r.mean_score:.2f} | {r.mean_chunks:.1f} | {r.seconds:.1f} |"
        )
    return lines


def _results_markdown(results: list[VariantResult], args: argparse.Namespace) -> str:
    lines = [
        "# Variant Comparison",
        "",
        f"- generated_at: `{datetime.now().isoformat(timespec='seconds')}`",
        f"- tasks: `{', '.join(args.tasks)}`",
        f"- episodes per cell: `{args.episodes}`",
        f"- batch_size: `{args.batch}`",
        f"- max_chunks: `{args.max_chunks}`",
        f"- backend: `{args.backend}`",
        f"- seed: `{args.seed}`",
        "",
        *_table_lines(results),
        "",
    ]
    return "\n".join(lines)


def _resolve_output_path(raw: str, ext: str) -> Path:
    if raw != "auto":
        return Path(raw)
    ts = datetime.now().strftime("%Y%m%d_%H%M%S")
    out_dir = Path("benchmarks") / "results"
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / f"variants_{ts}.{ext}"


def main() -> None:
    parser = argparse.ArgumentParser(description="Compare steering variants on a perturbation suite")
    parser.add_argument("--tasks", nargs="+", default=["move_cube_to_zone", "open_drawer"])
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    parser.add_argument("--episodes", type=int, default=20)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--max-chunks", type=int, default=20)
    parser.add_argument("--shift", type=float, default=0.15, help="position_shift delta (0 disables)")
    parser.add_argument("--retarget", action="store_true", help="Add an instruction_change cell")
    parser.add_argument("--mcmc-step-scale", type=float, default=0.005)
    parser.add_argument("--backend", choices=["diffusion", "flow"], default="diffusion")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--json", action="store_true")
    parser.add_argument("--save-md", default="", help="Save markdown report path (or 'auto')")
    parser.add_argument("--save-json", default="", help="Save json report path (or 'auto')")
    args = parser.parse_args()

    results = run_variants(args)
    if args.json:
        print(json.dumps([dataclasses.asdict(r) for r in results], indent=2))
        return
    print_table(results)

    if args.save_md:
        md_path = _resolve_output_path(args.save_md, "md")
        md_path.parent.mkdir(parents=True, exist_ok=True)
        md_path.write_text(_results_markdown(results, args), encoding="utf-8")
        print(f"\nSaved markdown report: {md_path}")
    if args.save_json:
        json_path = _resolve_output_path(args.save_json, "json")
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2), encoding="utf-8")
        print(f"Saved JSON report: {json_path}")


if __name__ == "__main__":
    main()
