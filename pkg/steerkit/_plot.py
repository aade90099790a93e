"""SVG trajectory plots of executed episodes."""

from __future__ import annotations

import io
import logging
import re
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Circle
from numpy.typing import NDArray

from ._world import Scene

if TYPE_CHECKING:
    from ._bench import EpisodeResult

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

STAGE_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown")
_RC = {"svg.hashsalt": "steerkit", "path.simplify": False, "svg.fonttype": "none"}


def stage_segments(result: EpisodeResult) -> list[tuple[int, FloatArray]]:
    """Split an episode's gripper path into runs of constant stage, in execution order.

    Every segment begins at the point where the previous one ended, and the
    first begins at the initial gripper position when the episode carries its
    initial scene, so the drawn segments form one connected path.
    """
    segments: list[tuple[int, FloatArray]] = []
    if len(result.path_stages) == 0:
        return segments
    stages = np.asarray(result.path_stages)
    path = np.asarray(result.path, dtype=np.float64)
    cuts = np.flatnonzero(np.diff(stages)) + 1
    anchor: FloatArray | None = None
    if result.initial_scene is not None:
        anchor = np.asarray(result.initial_scene.gripper.position, dtype=np.float64)[: path.shape[1]]
    start = 0
    for stop in [*cuts.tolist(), len(stages)]:
        points = path[start:stop]
        if anchor is not None:
            points = np.vstack([anchor[None, :], points])
        segments.append((int(stages[start]), points))
        anchor = path[stop - 1]
        start = stop
    return segments


def plot_trajectories(results: Sequence[EpisodeResult], scene: Scene) -> str:
    """Draw the workspace, zones, objects, handles and every episode's path as an SVG document."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5, 5))
        ax = fig.add_subplot(1, 1, 1)
        ax.set_xlim(scene.lower[0], scene.upper[0])
        ax.set_ylim(scene.lower[1], scene.upper[1])
        ax.set_aspect("equal")

        for zone in scene.zones:
            ax.add_patch(Circle(zone.center[:2], zone.radius, color="0.85", zorder=0))
            ax.annotate(zone.label, zone.center[:2], ha="center", va="center", fontsize=7)
        for obj in scene.objects:
            ax.plot(obj.position[0], obj.position[1], marker="s", color="0.3", linestyle="none")
            ax.annotate(obj.label, obj.position[:2], xytext=(4, 4), textcoords="offset points", fontsize=7)
        for part in scene.parts:
            lo, hi = part.handle_at(0.0), part.handle_at(1.0)
            ax.plot([lo[0], hi[0]], [lo[1], hi[1]], color="0.6", linewidth=3)
            ax.plot(part.handle[0], part.handle[1], marker="o", color="0.2", linestyle="none")
            ax.annotate(part.label, part.handle[:2], xytext=(4, -8), textcoords="offset points", fontsize=7)
        start = scene.gripper.position
        ax.plot(start[0], start[1], marker="x", color="black", linestyle="none")

        for result in results:
            for stage, points in stage_segments(result):
                color = STAGE_COLORS[(stage - 1) % len(STAGE_COLORS)]
                ax.plot(points[:, 0], points[:, 1], color=color, linewidth=1.0, marker=".", markersize=2)

        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "cell"


def write_cell_plots(results: Sequence[EpisodeResult], out_dir: str | Path) -> list[Path]:
    """One SVG per (task, perturbation, variant) cell over the cell's first initial scene."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells: dict[tuple[str, str, str], list[EpisodeResult]] = {}
    for r in results:
        cells.setdefault((r.task, r.perturbation, r.variant), []).append(r)
    written = []
    for (task, pert, variant), group in cells.items():
        scene = next((r.initial_scene for r in group if r.initial_scene is not None), None)
        if scene is None:
            continue
        path = out / f"{_slug(task)}__{_slug(pert)}__{_slug(variant)}.svg"
        path.write_text(plot_trajectories(group, scene), encoding="utf-8")
        written.append(path)
    logger.info("wrote %d trajectory plot(s) to %s", len(written), out)
    return written
