"""Reward program syntax tree, widths and the canonical printer.

Every expression denotes a row vector per particle; scalars have width 1.
Chunk references may be indexed by the reduction variable ``t`` only inside
``sum_t`` / ``mean_t`` / ``softmin_t`` / ``softmax_t``.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np
from numpy.typing import NDArray

from ._exceptions import ConfigError

DEFAULT_HIGH = -0.05
DEFAULT_LOW = -0.5
IMPLICIT_STAGE = "main"

UNARY_FUNCTIONS = ("exp", "log", "tanh", "sigmoid", "softplus", "sqrt_safe")
REDUCTIONS = ("sum_t", "mean_t", "softmin_t", "softmax_t")
BINARY_OPS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class RewardDims:
    T: int
    D: int
    n: int

    def __post_init__(self) -> None:
        if self.T < 1 or self.D < 2 or self.n < 0:
            raise ConfigError("reward dims", (self.T, self.D, self.n), "T >= 1, D >= 2, n >= 0")

    @property
    def positional(self) -> int:
        return self.D - 1


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Labelled anchor points in workspace coordinates, one row per keypoint."""

    points: NDArray[np.float64]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[0] != len(self.labels):
            raise ConfigError("keypoints", self.points.shape, f"{len(self.labels)} rows")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("keypoint labels", self.labels, "unique labels")
        if not np.all(np.isfinite(self.points)):
            raise ConfigError("keypoints", "non-finite coordinates", "finite coordinates")

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, list[float] | tuple[float, ...]]], dim: int = 2) -> KeypointSet:
        points = np.array([p for _, p in pairs], dtype=np.float64).reshape(len(pairs), dim)
        return cls(points=points, labels=tuple(label for label, _ in pairs))

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
#  Nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Index:
    """A time index: a literal, ``T`` plus an offset, or the reduction variable ``t`` plus an offset."""

    base: Literal["int", "T", "t"]
    offset: int = 0

    def resolve(self, horizon: int) -> int:
        return self.offset if self.base == "int" else horizon + self.offset


@dataclass(frozen=True)
class Selector:
    """Coordinate selection ``[lo]`` (``is_slice`` false) or ``[lo:hi]``."""

    lo: int
    hi: int
    is_slice: bool = True


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class ChunkRef:
    kind: Literal["a", "cum"]
    time: Index
    sel: Selector | None = None


@dataclass(frozen=True)
class KeypointRef:
    index: int
    sel: Selector | None = None


@dataclass(frozen=True)
class GripRef:
    sel: Selector | None = None


@dataclass(frozen=True)
class Unary:
    op: str
    arg: Node


@dataclass(frozen=True)
class Binary:
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Power:
    base: Node
    exponent: float


@dataclass(frozen=True)
class Reduce:
    op: str
    arg: Node
    tau: float | None = None


@dataclass(frozen=True)
class Norm:
    arg: Node


@dataclass(frozen=True)
class Dot:
    left: Node
    right: Node


Node = Union[Const, ChunkRef, KeypointRef, GripRef, Unary, Binary, Power, Reduce, Norm, Dot]


@dataclass(frozen=True)
class Stage:
    name: str
    reward: Node
    high: float = DEFAULT_HIGH
    low: float = DEFAULT_LOW
    description: str = ""


@dataclass(frozen=True)
class RewardProgram:
    stages: tuple[Stage, ...]
    dims: RewardDims = field(compare=False)

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    def stage(self, s: int) -> Stage:
        """Return stage ``s`` (1-based)."""
        if not 1 <= s <= len(self.stages):
            raise ConfigError("stage index", s, f"a value in 1..{len(self.stages)}")
        return self.stages[s - 1]


# ---------------------------------------------------------------------------
#  Structure helpers
# ---------------------------------------------------------------------------

def children(node: Node) -> tuple[Node, ...]:
    if isinstance(node, (Unary, Reduce, Norm)):
        return (node.arg,)
    if isinstance(node, Power):
        return (node.base,)
    if isinstance(node, (Binary, Dot)):
        return (node.left, node.right)
    return ()


def walk(node: Node) -> Iterator[Node]:
    yield node
    for child in children(node):
        yield from walk(child)


def time_offsets(node: Node) -> list[int]:
    """Offsets of ``t``-indexed chunk references bound by the nearest enclosing reduction."""
    if isinstance(node, ChunkRef):
        return [node.time.offset] if node.time.base == "t" else []
    if isinstance(node, Reduce):
        return []
    out: list[int] = []
    for child in children(node):
        out.extend(time_offsets(child))
    return out


def reduction_range(node: Reduce, horizon: int) -> tuple[int, int]:
    """Half-open range of ``t`` over which every ``t``-reference in ``node`` is in bounds."""
    offsets = time_offsets(node.arg)
    if not offsets:
        return 0, horizon
    return max(0, -min(offsets)), horizon - max(0, max(offsets))


def selector_width(sel: Selector | None, full: int) -> int:
    if sel is None:
        return full
    return sel.hi - sel.lo


# ---------------------------------------------------------------------------
#  Printer
# ---------------------------------------------------------------------------

def _fmt_number(value: float) -> str:
    return repr(float(value))


def _fmt_index(idx: Index) -> str:
    if idx.base == "int":
        return str(idx.offset)
    if idx.offset == 0:
        return idx.base
    sign = "+" if idx.offset > 0 else "-"
    return f"{idx.base}{sign}{abs(idx.offset)}"


def _fmt_sel(sel: Selector | None) -> str:
    if sel is None:
        return ""
    if sel.is_slice:
        return f"[{sel.lo}:{sel.hi}]"
    return f"[{sel.lo}]"


def print_expr(node: Node) -> str:
    """Fully parenthesized text that parses back to a structurally equal tree."""
    if isinstance(node, Const):
        text = _fmt_number(node.value)
        return f"({text})" if node.value < 0 else text
    if isinstance(node, ChunkRef):
        head = "a" if node.kind == "a" else "cum(a)"
        return f"{head}[{_fmt_index(node.time)}]{_fmt_sel(node.sel)}"
    if isinstance(node, KeypointRef):
        return f"p[{node.index}]{_fmt_sel(node.sel)}"
    if isinstance(node, GripRef):
        return f"grip_start{_fmt_sel(node.sel)}"
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{print_expr(node.arg)})"
        return f"{node.op}({print_expr(node.arg)})"
    if isinstance(node, Binary):
        return f"({print_expr(node.left)} {node.op} {print_expr(node.right)})"
    if isinstance(node, Power):
        return f"({print_expr(node.base)} ^ {_fmt_number(node.exponent)})"
    if isinstance(node, Reduce):
        if node.tau is not None:
            return f"{node.op}({_fmt_number(node.tau)}, {print_expr(node.arg)})"
        return f"{node.op}({print_expr(node.arg)})"
    if isinstance(node, Norm):
        return f"norm2({print_expr(node.arg)})"
    if isinstance(node, Dot):
        return f"dot({print_expr(node.left)}, {print_expr(node.right)})"
    raise TypeError(f"Unknown reward node {node!r}")


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def print_program(program: RewardProgram, header: bool = False) -> str:
    lines = []
    if header:
        d = program.dims
        lines.append(f"dims T={d.T} D={d.D} n={d.n}")
    for stage in program.stages:
        desc = f" {_quote(stage.description)}" if stage.description else ""
        lines.append(f"stage {stage.name}{desc} {{")
        lines.append(f"  reward: {print_expr(stage.reward)};")
        lines.append(f"  high: {_fmt_number(stage.high)};")
        lines.append(f"  low: {_fmt_number(stage.low)};")
        lines.append("}")
    return "\n".join(lines) + "\n"
