"""Task families, success predicates, oracle grounding and perturbations."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np

from ._exceptions import GroundingError, PerturbationError, SceneValidationError
from ._reward_ast import KeypointSet
from ._world import (
    ArticulatedPart,
    Gripper,
    Scene,
    SceneObject,
    Zone,
    _dist,
)

logger = logging.getLogger(__name__)

PredicateKind = Literal["object_in_zone", "joint_above", "joint_below", "holding"]
PerturbationKind = Literal[
    "none", "position_shift", "object_substitute", "distractor_insert", "instruction_change", "position_swap"
]

FAMILIES = ("move_cube_to_zone", "open_drawer", "close_drawer", "press_button", "toggle_switch")
COLORS = ("red", "green", "blue")
ZONES = ("green", "yellow")
ZONE_RADIUS = 0.08
JOINT_THRESHOLD = 0.8
MAX_PLACEMENT_ATTEMPTS = 100
MIN_SEPARATION = 0.08
PLACEMENT_MARGIN = 0.05

_CUBES = {"red": (0.3, 0.4), "green": (0.5, 0.3), "blue": (0.7, 0.4)}
_ZONE_CENTERS = {"green": (0.2, 0.15), "yellow": (0.8, 0.15)}
# label: (base, axis, travel)
_PARTS = {
    "drawer": ((0.15, 0.85), (0.0, -1.0), 0.2),
    "button": ((0.5, 0.9), (0.0, 1.0), 0.05),
    "switch": ((0.85, 0.85), (1.0, 0.0), 0.1),
}
_GRIPPER_HOME = (0.5, 0.6)

_MOVE_RE = re.compile(r"^\s*move the (\w+) cube to the (\w+) zone\s*$", re.IGNORECASE)
_PART_RE = re.compile(r"^\s*(open|close) the drawer\s*$|^\s*press the button\s*$|^\s*toggle the switch\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class Predicate:
    kind: PredicateKind
    subject: str
    zone: str | None = None
    threshold: float | None = None


@dataclass(frozen=True)
class TaskSpec:
    family: str
    instruction: str
    predicate: Predicate

    @property
    def target(self) -> str:
        return self.predicate.subject

    @property
    def referenced(self) -> tuple[str, ...]:
        if self.predicate.zone is not None:
            return (self.predicate.subject, self.predicate.zone)
        return (self.predicate.subject,)


def move_task(color: str, zone: str) -> TaskSpec:
    return TaskSpec(
        family="move_cube_to_zone",
        instruction=f"move the {color} cube to the {zone} zone",
        predicate=Predicate("object_in_zone", f"{color}_cube", zone=f"{zone}_zone"),
    )


def part_task(part: ArticulatedPart) -> TaskSpec:
    """The task that actuates ``part`` from its current state: a closed drawer opens, an open one closes."""
    if part.label == "drawer":
        return make_task("open_drawer" if part.joint < JOINT_THRESHOLD else "close_drawer")
    if part.label == "button":
        return make_task("press_button")
    if part.label == "switch":
        return make_task("toggle_switch")
    raise GroundingError(part.label)


def parse_instruction(instruction: str) -> TaskSpec | None:
    """Map an instruction onto a task family, or ``None`` when no template matches."""
    m = _MOVE_RE.match(instruction)
    if m:
        return move_task(m.group(1).lower(), m.group(2).lower())
    if not _PART_RE.match(instruction):
        return None
    text = instruction.strip().lower()
    if text.startswith("open"):
        return TaskSpec("open_drawer", text, Predicate("joint_above", "drawer", threshold=JOINT_THRESHOLD))
    if text.startswith("close"):
        return TaskSpec("close_drawer", text, Predicate("joint_below", "drawer", threshold=1.0 - JOINT_THRESHOLD))
    if text.startswith("press"):
        return TaskSpec("press_button", text, Predicate("joint_above", "button", threshold=JOINT_THRESHOLD))
    return TaskSpec("toggle_switch", text, Predicate("joint_above", "switch", threshold=JOINT_THRESHOLD))


def make_task(family: str, color: str = "red", zone: str = "green") -> TaskSpec:
    """Default task for ``family``; ``color`` and ``zone`` apply to move_cube_to_zone."""
    if family == "move_cube_to_zone":
        return move_task(color, zone)
    instructions = {
        "open_drawer": "open the drawer",
        "close_drawer": "close the drawer",
        "press_button": "press the button",
        "toggle_switch": "toggle the switch",
    }
    if family not in instructions:
        raise SceneValidationError("$.family", f"unknown task family {family!r}")
    task = parse_instruction(instructions[family])
    assert task is not None
    return task


def nominal_scene(task: TaskSpec, rng: np.random.Generator | None = None, jitter: float = 0.0) -> Scene:
    """The fixed training layout. ``jitter`` displaces each cube and part base uniformly by up to that much."""
    objects = []
    for color, pos in _CUBES.items():
        p = np.asarray(pos)
        if jitter > 0.0 and rng is not None:
            p = p + rng.uniform(-jitter, jitter, size=2)
        objects.append(SceneObject(f"{color}_cube", f"{color}_cube", (float(p[0]), float(p[1]))))
    parts = []
    for label, (base, axis, travel) in _PARTS.items():
        joint = 1.0 if (task.family == "close_drawer" and label == "drawer") else 0.0
        b = np.asarray(base)
        if jitter > 0.0 and rng is not None:
            b = b + rng.uniform(-jitter, jitter, size=2)
        parts.append(ArticulatedPart(label, label, joint, axis, travel, (float(b[0]), float(b[1]))))
    zones = [Zone(f"{name}_zone", center, ZONE_RADIUS) for name, center in _ZONE_CENTERS.items()]
    return Scene(
        gripper=Gripper(position=_GRIPPER_HOME),
        objects=tuple(objects),
        parts=tuple(parts),
        zones=tuple(zones),
    )


# ---------------------------------------------------------------------------
#  Grounding and success
# ---------------------------------------------------------------------------

def _require(scene: Scene, label: str) -> SceneObject | ArticulatedPart | Zone:
    entity = scene.find_label(label)
    if entity is None:
        raise GroundingError(label)
    return entity


def goal_point(part: ArticulatedPart, predicate: Predicate) -> tuple[float, ...]:
    return part.handle_at(0.0 if predicate.kind == "joint_below" else 1.0)


def ground_keypoints(scene: Scene, task: TaskSpec) -> KeypointSet:
    """Oracle keypoints: the target's position, then the zone centre or the part's goal handle position."""
    pred = task.predicate
    entity = _require(scene, pred.subject)
    if isinstance(entity, SceneObject):
        if pred.zone is None:
            return KeypointSet.from_pairs([(entity.label, entity.position)], scene.dim)
        zone = _require(scene, pred.zone)
        if not isinstance(zone, Zone):
            raise GroundingError(pred.zone)
        return KeypointSet.from_pairs([(entity.label, entity.position), (zone.label, zone.center)], scene.dim)
    if isinstance(entity, ArticulatedPart):
        return KeypointSet.from_pairs(
            [(entity.label, entity.handle), (f"{entity.label}_goal", goal_point(entity, pred))], scene.dim
        )
    raise GroundingError(pred.subject)


def check_success(scene: Scene, task: TaskSpec) -> bool:
    """Evaluate the task predicate. Zones are closed balls."""
    pred = task.predicate
    entity = _require(scene, pred.subject)
    if pred.kind == "object_in_zone":
        zone = _require(scene, pred.zone or "")
        if not isinstance(entity, SceneObject) or not isinstance(zone, Zone):
            raise GroundingError(pred.subject)
        return _dist(entity.position, zone.center) <= zone.radius
    if pred.kind == "holding":
        return scene.held_label() == pred.subject
    if not isinstance(entity, ArticulatedPart) or pred.threshold is None:
        raise GroundingError(pred.subject)
    if pred.kind == "joint_above":
        return entity.joint >= pred.threshold
    return entity.joint <= pred.threshold


def target_engaged(scene: Scene, task: TaskSpec) -> bool:
    """True when the task's target object was ever grasped or its handle ever moved."""
    entity = scene.find_label(task.predicate.subject)
    return entity is not None and isinstance(entity, (SceneObject, ArticulatedPart)) and entity.id in scene.contacts


# ---------------------------------------------------------------------------
#  Perturbations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """A named test-time perturbation.

    ``params`` per kind: ``position_shift`` {"delta"}; ``object_substitute``
    {"old", "new", "relocate"}; ``distractor_insert`` {"count"};
    ``instruction_change`` {"instruction"}, {"color", "zone"} for move tasks
    or {"part"} for articulated tasks;
    ``position_swap`` {"objects": [a, b]} (optional).
    """

    kind: PerturbationKind
    name: str = ""
    params: dict[str, Any] = field(default_factory=dict, hash=False)
    seed: int = 0

    @property
    def label(self) -> str:
        return self.name or self.kind

    @classmethod
    def from_mapping(cls, doc: dict[str, Any]) -> PerturbationSpec:
        if not isinstance(doc, dict) or "kind" not in doc:
            raise SceneValidationError("$.kind", "missing perturbation kind")
        kind = doc["kind"]
        if kind not in ("none", "position_shift", "object_substitute", "distractor_insert",
                        "instruction_change", "position_swap"):
            raise SceneValidationError("$.kind", f"unknown perturbation kind {kind!r}")
        params = {k: v for k, v in doc.items() if k not in ("kind", "name", "seed")}
        spec = cls(kind=kind, name=str(doc.get("name", "")), params=params, seed=int(doc.get("seed", 0)))
        spec.validate()
        return spec

    def to_mapping(self) -> dict[str, Any]:
        return {"kind": self.kind, "name": self.name, "seed": self.seed, **self.params}

    def validate(self) -> None:
        p = self.params
        if self.kind == "position_shift":
            delta = float(p.get("delta", 0.0))
            if not 0.0 <= delta <= 0.5:
                raise SceneValidationError("$.delta", f"{delta} outside [0, 0.5]")
        elif self.kind == "object_substitute":
            if "old" not in p or "new" not in p:
                raise SceneValidationError("$", "object_substitute needs 'old' and 'new'")
        elif self.kind == "distractor_insert":
            count = int(p.get("count", 1))
            if count < 0:
                raise SceneValidationError("$.count", "must be >= 0")
        elif self.kind == "instruction_change":
            if not any(key in p for key in ("instruction", "color", "zone", "part")):
                raise SceneValidationError("$", "instruction_change needs 'instruction', 'color', 'zone' or 'part'")


NO_PERTURBATION = PerturbationSpec(kind="none", name="none")


def _free(point: np.ndarray, scene: Scene, ignore: str | None = None) -> bool:
    lo = np.asarray(scene.lower) + PLACEMENT_MARGIN
    hi = np.asarray(scene.upper) - PLACEMENT_MARGIN
    if np.any(point < lo) or np.any(point > hi):
        return False
    for obj in scene.objects:
        if obj.id != ignore and _dist(obj.position, point) < MIN_SEPARATION:
            return False
    for part in scene.parts:
        if _dist(part.handle, point) < MIN_SEPARATION:
            return False
    return _dist(scene.gripper.position, point) >= MIN_SEPARATION


def _sample_free(
    scene: Scene, kind: str, rng: np.random.Generator, propose: Any, ignore: str | None = None
) -> np.ndarray:
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        candidate = np.asarray(propose(), dtype=np.float64)
        if _free(candidate, scene, ignore):
            return candidate
    raise PerturbationError(kind, MAX_PLACEMENT_ATTEMPTS)


def _move_object(scene: Scene, ident: str, point: Any) -> Scene:
    objects = tuple(
        replace(o, position=tuple(float(v) for v in point)) if o.id == ident else o for o in scene.objects
    )
    return replace(scene, objects=objects)


def apply_perturbation(
    scene: Scene, task: TaskSpec, spec: PerturbationSpec, rng: np.random.Generator | None = None
) -> tuple[Scene, TaskSpec]:
    """Return the perturbed scene and task. Without ``rng`` the perturbation's own seed is used."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    kind = spec.kind
    p = spec.params
    if kind == "none":
        return scene, task

    if kind == "position_shift":
        delta = float(p.get("delta", 0.0))
        if delta == 0.0:
            return scene, task
        target = scene.find_label(task.target)
        if isinstance(target, SceneObject):
            origin = np.asarray(target.position)
            point = _sample_free(
                scene, kind, rng, lambda: origin + rng.uniform(-delta, delta, size=scene.dim), target.id
            )
            return _move_object(scene, target.id, point), task
        if isinstance(target, ArticulatedPart):
            origin = np.asarray(target.base)
            shifted = None
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                base = origin + rng.uniform(-delta, delta, size=scene.dim)
                moved = replace(target, base=tuple(float(v) for v in base))
                if all(
                    lo <= v <= hi
                    for end in (moved.handle_at(0.0), moved.handle_at(1.0))
                    for v, lo, hi in zip(end, scene.lower, scene.upper)
                ):
                    shifted = moved
                    break
            if shifted is None:
                raise PerturbationError(kind, MAX_PLACEMENT_ATTEMPTS)
            parts = tuple(shifted if q.id == target.id else q for q in scene.parts)
            return replace(scene, parts=parts), task
        raise GroundingError(task.target)

    if kind == "object_substitute":
        old, new = str(p["old"]), str(p["new"])
        entity = scene.find_label(old)
        if not isinstance(entity, SceneObject):
            raise GroundingError(old)
        if scene.find_label(new) is not None:
            raise PerturbationError(kind, 0, f"Label {new!r} already exists in the scene.")
        objects = tuple(replace(o, label=new) if o.id == entity.id else o for o in scene.objects)
        scene = replace(scene, objects=objects)
        if p.get("relocate", False):
            lo, hi = np.asarray(scene.lower), np.asarray(scene.upper)
            point = _sample_free(scene, kind, rng, lambda: rng.uniform(lo, hi), entity.id)
            scene = _move_object(scene, entity.id, point)
        pred = task.predicate
        if pred.subject == old:
            instruction = task.instruction.replace(old.replace("_", " "), new.replace("_", " "))
            task = replace(task, instruction=instruction, predicate=replace(pred, subject=new))
        return scene, task

    if kind == "distractor_insert":
        count = int(p.get("count", 1))
        lo, hi = np.asarray(scene.lower), np.asarray(scene.upper)
        existing = sum(1 for o in scene.objects if o.id.startswith("distractor_"))
        for i in range(count):
            point = _sample_free(scene, kind, rng, lambda: rng.uniform(lo, hi))
            ident = f"distractor_{existing + i + 1}"
            obj = SceneObject(ident, ident, tuple(float(v) for v in point))
            scene = replace(scene, objects=scene.objects + (obj,))
        return scene, task

    if kind == "instruction_change":
        if "instruction" in p:
            changed = parse_instruction(str(p["instruction"]))
            if changed is None:
                raise PerturbationError(kind, 0, f"No task template matches {p['instruction']!r}.")
            return scene, changed
        if task.family != "move_cube_to_zone":
            # Articulated tasks retarget to another part; color and zone do not apply.
            if "part" in p:
                label = str(p["part"])
            else:
                labels = [q.label for q in scene.parts]
                if task.target not in labels or len(labels) < 2:
                    raise PerturbationError(kind, 0, "no other articulated part to retarget to.")
                label = labels[(labels.index(task.target) + 1) % len(labels)]
            part = scene.find_label(label)
            if not isinstance(part, ArticulatedPart):
                raise GroundingError(label)
            return scene, part_task(part)
        m = re.match(r"(\w+)_cube$", task.predicate.subject)
        zm = re.match(r"(\w+)_zone$", task.predicate.zone or "")
        color = str(p.get("color", m.group(1) if m else "red"))
        zone = str(p.get("zone", zm.group(1) if zm else "green"))
        return scene, move_task(color, zone)

    if kind == "position_swap":
        movable = [o for o in scene.objects if o.movable]
        if len(movable) < 2:
            raise PerturbationError(kind, 0, "position_swap needs at least two movable objects.")
        if "objects" in p:
            labels = list(p["objects"])
            pair = [scene.find_label(lbl) for lbl in labels]
            if any(not isinstance(e, SceneObject) for e in pair):
                raise GroundingError(str(labels))
            first, second = pair  # type: ignore[misc]
        else:
            target = scene.find_label(task.target)
            first = target if isinstance(target, SceneObject) and target.movable else movable[0]
            second = next(o for o in movable if o.id != first.id)
        scene = _move_object(scene, first.id, second.position)
        scene = _move_object(scene, second.id, first.position)
        return scene, task

    raise PerturbationError(kind, 0, f"Unknown perturbation kind {kind!r}.")


def load_task(doc: dict[str, Any]) -> TaskSpec:
    if "instruction" in doc:
        task = parse_instruction(str(doc["instruction"]))
        if task is None:
            raise SceneValidationError("$.instruction", f"no task template matches {doc['instruction']!r}")
        return task
    if "family" not in doc:
        raise SceneValidationError("$.family", "missing field")
    return make_task(str(doc["family"]), str(doc.get("color", "red")), str(doc.get("zone", "green")))
