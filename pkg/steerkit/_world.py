"""Deterministic kinematic tabletop world.

Positions live in the unit square (or cube for D=4 chunks). An action is a
``D``-vector: ``D - 1`` positional deltas, clamped per coordinate to
``STEP_CLAMP``, and one gripper command. Each step first moves the gripper
(dragging a held object and any engaged articulated handle) and then applies
the gripper command.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from ._exceptions import ConfigError, SceneValidationError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Point = tuple[float, ...]

STEP_CLAMP = 0.1
GRASP_RADIUS = 0.05
HANDLE_RADIUS = 0.05
CLOSE_THRESHOLD = 0.5
OPEN_THRESHOLD = -0.5


@dataclass(frozen=True)
class SceneObject:
    id: str
    label: str
    position: Point
    movable: bool = True


@dataclass(frozen=True)
class ArticulatedPart:
    """A 1-DOF prismatic part; the handle sits at ``base + joint * travel * axis``."""

    id: str
    label: str
    joint: float
    axis: Point
    travel: float
    base: Point

    @property
    def handle(self) -> Point:
        return tuple(b + self.joint * self.travel * a for b, a in zip(self.base, self.axis))

    def handle_at(self, joint: float) -> Point:
        return tuple(b + joint * self.travel * a for b, a in zip(self.base, self.axis))


@dataclass(frozen=True)
class Zone:
    label: str
    center: Point
    radius: float


@dataclass(frozen=True)
class Gripper:
    position: Point
    closed: bool = False
    held: str | None = None


@dataclass(frozen=True)
class Scene:
    """World state. ``contacts`` lists ids ever grasped or engaged, in first-contact order."""

    gripper: Gripper
    objects: tuple[SceneObject, ...] = ()
    parts: tuple[ArticulatedPart, ...] = ()
    zones: tuple[Zone, ...] = ()
    lower: Point = (0.0, 0.0)
    upper: Point = (1.0, 1.0)
    contacts: tuple[str, ...] = field(default=())

    @property
    def dim(self) -> int:
        return len(self.lower)

    def object(self, ident: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == ident:
                return obj
        raise KeyError(ident)

    def find_label(self, label: str) -> SceneObject | ArticulatedPart | Zone | None:
        for entity in (*self.objects, *self.parts, *self.zones):
            if entity.label == label:
                return entity
        return None

    def held_label(self) -> str | None:
        if self.gripper.held is None:
            return None
        return self.object(self.gripper.held).label


def _clip(point: FloatArray, scene: Scene) -> FloatArray:
    return np.clip(point, scene.lower, scene.upper)


def _dist(a: Any, b: Any) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def _point(arr: FloatArray) -> Point:
    return tuple(float(v) for v in arr)


def step_env(scene: Scene, action: Any) -> Scene:
    """Apply one action. Physics is total: every finite action yields a valid scene."""
    a = np.asarray(action, dtype=np.float64)
    dim = scene.dim
    if a.shape != (dim + 1,) or not np.all(np.isfinite(a)):
        raise ConfigError("action", a.tolist(), f"{dim + 1} finite values")
    old = np.asarray(scene.gripper.position)
    new = _clip(old + np.clip(a[:dim], -STEP_CLAMP, STEP_CLAMP), scene)
    moved = new - old
    contacts = list(scene.contacts)

    objects = scene.objects
    held = scene.gripper.held
    if held is not None and np.any(moved != 0.0):
        objects = tuple(
            replace(o, position=_point(_clip(np.asarray(o.position) + moved, scene))) if o.id == held else o
            for o in objects
        )

    parts = scene.parts
    if np.any(moved != 0.0) and parts:
        near = [(_dist(p.handle, old), i) for i, p in enumerate(parts)]
        d, i = min(near)
        if d <= HANDLE_RADIUS:
            part = parts[i]
            shift = float(np.dot(moved, part.axis)) / part.travel
            joint = min(max(part.joint + shift, 0.0), 1.0)
            if joint != part.joint:
                parts = parts[:i] + (replace(part, joint=joint),) + parts[i + 1 :]
                if part.id not in contacts:
                    contacts.append(part.id)

    closed = scene.gripper.closed
    command = float(a[dim])
    if command > CLOSE_THRESHOLD:
        closed = True
        if held is None:
            candidates = [
                (_dist(o.position, new), idx)
                for idx, o in enumerate(objects)
                if o.movable and _dist(o.position, new) <= GRASP_RADIUS
            ]
            if candidates:
                held = objects[min(candidates)[1]].id
                if held not in contacts:
                    contacts.append(held)
    elif command < OPEN_THRESHOLD:
        closed = False
        held = None

    return Scene(
        gripper=Gripper(position=_point(new), closed=closed, held=held),
        objects=objects,
        parts=parts,
        zones=scene.zones,
        lower=scene.lower,
        upper=scene.upper,
        contacts=tuple(contacts),
    )


def execute_chunk(scene: Scene, chunk: Any) -> Scene:
    for action in np.asarray(chunk, dtype=np.float64):
        scene = step_env(scene, action)
    return scene


def rollout_chunk(scene: Scene, chunk: Any) -> tuple[Scene, FloatArray]:
    """Execute ``chunk`` and return the final scene with the gripper position after each step."""
    path = []
    for action in np.asarray(chunk, dtype=np.float64):
        scene = step_env(scene, action)
        path.append(scene.gripper.position)
    return scene, np.array(path, dtype=np.float64).reshape(len(path), scene.dim)


# ---------------------------------------------------------------------------
#  Documents
# ---------------------------------------------------------------------------

def save_scene(scene: Scene) -> dict[str, Any]:
    return {
        "bounds": [list(scene.lower), list(scene.upper)],
        "gripper": {
            "position": list(scene.gripper.position),
            "closed": scene.gripper.closed,
            "held": scene.gripper.held,
        },
        "objects": [
            {"id": o.id, "label": o.label, "position": list(o.position), "movable": o.movable}
            for o in scene.objects
        ],
        "parts": [
            {
                "id": p.id,
                "label": p.label,
                "joint": p.joint,
                "axis": list(p.axis),
                "travel": p.travel,
                "base": list(p.base),
            }
            for p in scene.parts
        ],
        "zones": [{"label": z.label, "center": list(z.center), "radius": z.radius} for z in scene.zones],
        "contacts": list(scene.contacts),
    }


class _Reader:
    def __init__(self, dim: int, lower: Point, upper: Point) -> None:
        self.dim = dim
        self.lower = lower
        self.upper = upper

    def field(self, doc: Any, key: str, path: str) -> Any:
        if not isinstance(doc, dict) or key not in doc:
            raise SceneValidationError(f"{path}.{key}", "missing field")
        return doc[key]

    def point(self, value: Any, path: str, bounded: bool = True) -> Point:
        if not isinstance(value, list) or len(value) != self.dim:
            raise SceneValidationError(path, f"expected {self.dim} coordinates")
        try:
            pt = tuple(float(v) for v in value)
        except (TypeError, ValueError):
            raise SceneValidationError(path, "coordinates must be numbers") from None
        if not all(math.isfinite(v) for v in pt):
            raise SceneValidationError(path, "coordinates must be finite")
        if bounded and any(v < lo or v > hi for v, lo, hi in zip(pt, self.lower, self.upper)):
            raise SceneValidationError(path, f"{list(pt)} lies outside the workspace bounds")
        return pt


def load_scene(doc: dict[str, Any]) -> Scene:
    """Validate a scene document. Error paths look like ``$.objects[1].position``."""
    if not isinstance(doc, dict):
        raise SceneValidationError("$", "expected an object")
    bounds = doc.get("bounds", [[0.0, 0.0], [1.0, 1.0]])
    if not (
        isinstance(bounds, list)
        and len(bounds) == 2
        and all(isinstance(b, list) and b for b in bounds)
        and len(bounds[0]) == len(bounds[1])
    ):
        raise SceneValidationError("$.bounds", "expected [lower, upper]")
    try:
        lower = tuple(float(v) for v in bounds[0])
        upper = tuple(float(v) for v in bounds[1])
    except (TypeError, ValueError):
        raise SceneValidationError("$.bounds", "coordinates must be numbers") from None
    if not all(math.isfinite(v) for v in lower + upper):
        raise SceneValidationError("$.bounds", "coordinates must be finite")
    if not all(lo < hi for lo, hi in zip(lower, upper)):
        raise SceneValidationError("$.bounds", "lower bound must be below upper bound")
    r = _Reader(len(lower), lower, upper)

    g = r.field(doc, "gripper", "$")
    gripper = Gripper(
        position=r.point(r.field(g, "position", "$.gripper"), "$.gripper.position"),
        closed=bool(g.get("closed", False)),
        held=g.get("held"),
    )

    objects = []
    for i, o in enumerate(doc.get("objects", [])):
        path = f"$.objects[{i}]"
        objects.append(
            SceneObject(
                id=str(r.field(o, "id", path)),
                label=str(r.field(o, "label", path)),
                position=r.point(r.field(o, "position", path), f"{path}.position"),
                movable=bool(o.get("movable", True)),
            )
        )
    ids = [o.id for o in objects]
    if len(set(ids)) != len(ids):
        raise SceneValidationError("$.objects", "object ids must be unique")
    if gripper.held is not None and gripper.held not in ids:
        raise SceneValidationError("$.gripper.held", f"unknown object id {gripper.held!r}")

    parts = []
    for i, p in enumerate(doc.get("parts", [])):
        path = f"$.parts[{i}]"
        joint = float(r.field(p, "joint", path))
        if not 0.0 <= joint <= 1.0:
            raise SceneValidationError(f"{path}.joint", f"{joint} outside [0, 1]")
        travel = float(r.field(p, "travel", path))
        if not travel > 0.0:
            raise SceneValidationError(f"{path}.travel", "must be positive")
        part = ArticulatedPart(
            id=str(r.field(p, "id", path)),
            label=str(r.field(p, "label", path)),
            joint=joint,
            axis=r.point(r.field(p, "axis", path), f"{path}.axis", bounded=False),
            travel=travel,
            base=r.point(r.field(p, "base", path), f"{path}.base"),
        )
        r.point(list(part.handle_at(1.0)), f"{path}.travel")
        parts.append(part)

    zones = []
    for i, z in enumerate(doc.get("zones", [])):
        path = f"$.zones[{i}]"
        radius = float(r.field(z, "radius", path))
        if not radius > 0.0:
            raise SceneValidationError(f"{path}.radius", "must be positive")
        zones.append(
            Zone(
                label=str(r.field(z, "label", path)),
                center=r.point(r.field(z, "center", path), f"{path}.center"),
                radius=radius,
            )
        )

    labels = [e.label for e in (*objects, *parts, *zones)]
    if len(set(labels)) != len(labels):
        raise SceneValidationError("$", "entity labels must be unique")
    return Scene(
        gripper=gripper,
        objects=tuple(objects),
        parts=tuple(parts),
        zones=tuple(zones),
        lower=lower,
        upper=upper,
        contacts=tuple(str(c) for c in doc.get("contacts", [])),
    )


def read_scene(path: str | Path) -> Scene:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneValidationError(str(path), f"not valid JSON ({exc.msg})") from exc
    return load_scene(doc)


def write_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(save_scene(scene), indent=2), encoding="utf-8")
