"""Vectorized evaluation and reverse-mode differentiation of reward programs.

Evaluation records a tape (a Wengert list) of node values, each shaped
``(B, L, w)``: ``B`` particles, ``L`` time steps (1 outside reductions) and
width ``w``. The backward sweep walks the tape in reverse and accumulates
adjoints into the chunk gradient. Keypoints and ``grip_start`` are constants.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp, softmax

from ._exceptions import ConfigError, RewardEvaluationError
from ._reward_ast import (
    Binary,
    ChunkRef,
    Const,
    Dot,
    GripRef,
    KeypointRef,
    KeypointSet,
    Node,
    Norm,
    Power,
    Reduce,
    RewardProgram,
    Selector,
    Unary,
    print_expr,
    reduction_range,
)


FloatArray = NDArray[np.float64]
Backward = Callable[[FloatArray], tuple[FloatArray, ...]]

DIV_EPS = 1e-9
SQRT_EPS = 1e-12
GRAD_FLOOR = 1e-3


def _unbroadcast(adj: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum ``adj`` down to ``shape`` along broadcast axes."""
    for axis, size in enumerate(shape):
        if size == 1 and adj.shape[axis] != 1:
            adj = adj.sum(axis=axis, keepdims=True)
    return adj


def _sel(sel: Selector | None, full: int) -> slice:
    return slice(0, full) if sel is None else slice(sel.lo, sel.hi)


@dataclass
class _Entry:
    node: Node
    inputs: tuple[int, ...]
    backward: Backward | None


class _Tape:
    def __init__(
        self,
        chunks: FloatArray,
        kps: KeypointSet,
        grip_start: FloatArray,
        stage: str,
    ) -> None:
        self.chunks = chunks
        self.kps = kps
        self.grip = grip_start
        self.stage = stage
        b, horizon, dim = chunks.shape
        self.horizon = horizon
        self.dim = dim
        self.cum = grip_start + np.cumsum(chunks[:, :, : dim - 1], axis=1)
        self.values: list[FloatArray] = []
        self.entries: list[_Entry] = []
        # Leaf adjoints are scattered straight into these.
        self.grad_a = np.zeros_like(chunks)
        self.grad_cum = np.zeros((b, horizon, dim - 1))
        self.leaves: dict[int, Callable[[FloatArray], None]] = {}

    def push(
        self, node: Node, value: FloatArray, inputs: tuple[int, ...] = (), backward: Backward | None = None
    ) -> int:
        if not np.all(np.isfinite(value)):
            raise RewardEvaluationError(print_expr(node), self.stage)
        self.values.append(value)
        self.entries.append(_Entry(node, inputs, backward))
        return len(self.values) - 1

    # -- forward ------------------------------------------------------------

    def forward(self, node: Node, span: tuple[int, int] | None) -> int:
        if isinstance(node, Const):
            return self.push(node, np.full((1, 1, 1), node.value))
        if isinstance(node, ChunkRef):
            return self._chunk_ref(node, span)
        if isinstance(node, KeypointRef):
            if node.index >= len(self.kps):
                raise ConfigError("keypoint count", len(self.kps), f"more than {node.index}")
            row = self.kps.points[node.index, _sel(node.sel, self.dim - 1)]
            return self.push(node, row.reshape(1, 1, -1))
        if isinstance(node, GripRef):
            row = self.grip[_sel(node.sel, self.dim - 1)]
            return self.push(node, row.reshape(1, 1, -1))
        if isinstance(node, Unary):
            return self._unary(node, span)
        if isinstance(node, Binary):
            return self._binary(node, span)
        if isinstance(node, Power):
            i = self.forward(node.base, span)
            x = self.values[i]
            c = node.exponent
            with np.errstate(all="ignore"):
                y = x**c
            def back_pow(adj: FloatArray) -> tuple[FloatArray, ...]:
                if c == 0.0:
                    return (np.zeros_like(x),)
                with np.errstate(all="ignore"):
                    return (adj * c * x ** (c - 1.0),)
            return self.push(node, y, (i,), back_pow)
        if isinstance(node, Reduce):
            return self._reduce(node)
        if isinstance(node, Norm):
            i = self.forward(node.arg, span)
            x = self.values[i]
            y = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
            def back_norm(adj: FloatArray) -> tuple[FloatArray, ...]:
                safe = np.where(y > 0.0, y, 1.0)
                return (np.where(y > 0.0, adj * x / safe, 0.0),)
            return self.push(node, y, (i,), back_norm)
        if isinstance(node, Dot):
            i = self.forward(node.left, span)
            j = self.forward(node.right, span)
            lx, rx = self.values[i], self.values[j]
            y = np.sum(lx * rx, axis=-1, keepdims=True)
            return self.push(node, y, (i, j), lambda adj: (adj * rx, adj * lx))
        raise TypeError(f"Unknown reward node {node!r}")

    def _chunk_ref(self, node: ChunkRef, span: tuple[int, int] | None) -> int:
        if node.kind == "a":
            source, target, full = self.chunks, self.grad_a, self.dim
        else:
            source, target, full = self.cum, self.grad_cum, self.dim - 1
        cols = _sel(node.sel, full)
        if node.time.base == "t":
            assert span is not None
            rows = slice(span[0] + node.time.offset, span[1] + node.time.offset)
        else:
            at = node.time.resolve(self.horizon)
            rows = slice(at, at + 1)
        value = source[:, rows, cols]
        index = self.push(node, value)

        def scatter(adj: FloatArray) -> None:
            target[:, rows, cols] += np.broadcast_to(adj, value.shape)

        self.leaves[index] = scatter
        return index

    def _unary(self, node: Unary, span: tuple[int, int] | None) -> int:
        i = self.forward(node.arg, span)
        x = self.values[i]
        op = node.op
        with np.errstate(all="ignore"):
            if op == "neg":
                return self.push(node, -x, (i,), lambda adj: (-adj,))
            if op == "exp":
                y = np.exp(x)
                return self.push(node, y, (i,), lambda adj: (adj * y,))
            if op == "log":
                y = np.log(x)
                return self.push(node, y, (i,), lambda adj: (adj / x,))
            if op == "tanh":
                y = np.tanh(x)
                return self.push(node, y, (i,), lambda adj: (adj * (1.0 - y * y),))
            if op == "sigmoid":
                y = expit(x)
                return self.push(node, y, (i,), lambda adj: (adj * y * (1.0 - y),))
            if op == "softplus":
                y = np.logaddexp(0.0, x)
                return self.push(node, y, (i,), lambda adj: (adj * expit(x),))
            if op == "sqrt_safe":
                y = np.sqrt(np.maximum(x, 0.0) + SQRT_EPS)
                return self.push(node, y, (i,), lambda adj: (np.where(x > 0.0, 0.5 * adj / y, 0.0),))
        raise TypeError(f"Unknown unary operator {op!r}")

    def _binary(self, node: Binary, span: tuple[int, int] | None) -> int:
        i = self.forward(node.left, span)
        j = self.forward(node.right, span)
        lx, rx = self.values[i], self.values[j]
        op = node.op
        if op == "+":
            return self.push(node, lx + rx, (i, j), lambda adj: (adj, adj))
        if op == "-":
            return self.push(node, lx - rx, (i, j), lambda adj: (adj, -adj))
        if op == "*":
            return self.push(node, lx * rx, (i, j), lambda adj: (adj * rx, adj * lx))
        if op == "/":
            den = rx * rx + DIV_EPS
            y = lx * rx / den
            return self.push(
                node,
                y,
                (i, j),
                lambda adj: (adj * rx / den, adj * lx * (DIV_EPS - rx * rx) / (den * den)),
            )
        raise TypeError(f"Unknown binary operator {op!r}")

    def _reduce(self, node: Reduce) -> int:
        span = reduction_range(node, self.horizon)
        length = span[1] - span[0]
        i = self.forward(node.arg, span)
        x = np.broadcast_to(self.values[i], (self.values[i].shape[0], length, self.values[i].shape[2]))
        op = node.op
        if op == "sum_t":
            y = x.sum(axis=1, keepdims=True)
            return self.push(node, y, (i,), lambda adj: (np.broadcast_to(adj, x.shape),))
        if op == "mean_t":
            y = x.mean(axis=1, keepdims=True)
            return self.push(node, y, (i,), lambda adj: (np.broadcast_to(adj / length, x.shape),))
        tau = float(node.tau or 1.0)
        sign = -1.0 if op == "softmin_t" else 1.0
        z = sign * x / tau
        y = sign * tau * logsumexp(z, axis=1, keepdims=True)
        weights = softmax(z, axis=1)
        return self.push(node, y, (i,), lambda adj: (adj * weights,))

    # -- backward -----------------------------------------------------------

    def backward(self, root: int) -> FloatArray:
        adjoints: dict[int, FloatArray] = {root: np.ones_like(self.values[root])}
        for index in range(root, -1, -1):
            adj = adjoints.pop(index, None)
            if adj is None:
                continue
            entry = self.entries[index]
            if index in self.leaves:
                self.leaves[index](adj)
                continue
            if entry.backward is None:
                continue
            grads = entry.backward(adj)
            for child, g in zip(entry.inputs, grads):
                if not np.all(np.isfinite(g)):
                    raise RewardEvaluationError(print_expr(entry.node), self.stage)
                g = _unbroadcast(np.asarray(g), self.values[child].shape)
                if child in adjoints:
                    adjoints[child] = adjoints[child] + g
                else:
                    adjoints[child] = g
        # d cum[t] / d a[u] = 1 for u <= t: reverse prefix sum of the cum adjoint.
        self.grad_a[:, :, : self.dim - 1] += np.cumsum(self.grad_cum[:, ::-1], axis=1)[:, ::-1]
        return self.grad_a


def _prepare(
    chunks: Any, kps: KeypointSet, grip_start: Any, program: RewardProgram
) -> tuple[FloatArray, FloatArray]:
    arr = np.asarray(chunks, dtype=np.float64)
    dims = program.dims
    if arr.ndim != 3 or arr.shape[1:] != (dims.T, dims.D):
        raise ConfigError("chunk batch shape", arr.shape, f"(B, {dims.T}, {dims.D})")
    grip = np.zeros(dims.positional) if grip_start is None else np.asarray(grip_start, dtype=np.float64)
    if grip.shape != (dims.positional,):
        raise ConfigError("grip_start", grip.shape, f"shape ({dims.positional},)")
    return arr, grip


def reward_values(
    program: RewardProgram, s: int, chunks: Any, kps: KeypointSet, grip_start: Any = None
) -> FloatArray:
    """Stage-``s`` rewards for a (B, T, D) batch; returns shape (B,)."""
    stage = program.stage(s)
    arr, grip = _prepare(chunks, kps, grip_start, program)
    tape = _Tape(arr, kps, grip, stage.name)
    root = tape.forward(stage.reward, None)
    return np.broadcast_to(tape.values[root], (arr.shape[0], 1, 1)).reshape(arr.shape[0]).copy()


def reward_values_and_grads(
    program: RewardProgram, s: int, chunks: Any, kps: KeypointSet, grip_start: Any = None
) -> tuple[FloatArray, FloatArray]:
    """Rewards (B,) and their gradients (B, T, D) with respect to every chunk entry."""
    stage = program.stage(s)
    arr, grip = _prepare(chunks, kps, grip_start, program)
    tape = _Tape(arr, kps, grip, stage.name)
    root = tape.forward(stage.reward, None)
    b = arr.shape[0]
    # Particles are independent, so the batched backward sweep is exact per particle.
    tape.values[root] = np.broadcast_to(tape.values[root], (b, 1, 1))
    grad = tape.backward(root)
    return tape.values[root].reshape(b).copy(), grad


def eval_reward(
    program: RewardProgram, s: int, chunk: Any, kps: KeypointSet, grip_start: Any = None
) -> float:
    return float(reward_values(program, s, np.asarray(chunk, dtype=np.float64)[None], kps, grip_start)[0])


def grad_reward(
    program: RewardProgram, s: int, chunk: Any, kps: KeypointSet, grip_start: Any = None
) -> FloatArray:
    _, grad = reward_values_and_grads(
        program, s, np.asarray(chunk, dtype=np.float64)[None], kps, grip_start
    )
    return grad[0]


def check_grad(
    program: RewardProgram,
    s: int,
    chunk: Any,
    kps: KeypointSet,
    h: float = 1e-5,
    grip_start: Any = None,
    floor: float = GRAD_FLOOR,
) -> float:
    """Worst per-entry relative error between ``grad_reward`` and central differences.

    The error for each entry is ``|g - fd| / max(|g|, |fd|, floor)``. Expect
    larger values near kinks such as low-temperature ``softmin_t`` on near ties.
    """
    base = np.asarray(chunk, dtype=np.float64)
    analytic = grad_reward(program, s, base, kps, grip_start)
    horizon, dim = base.shape
    # All +h and -h perturbations evaluated as one batch.
    offsets = np.zeros((2 * horizon * dim, horizon, dim))
    for flat in range(horizon * dim):
        t, d = divmod(flat, dim)
        offsets[2 * flat, t, d] = h
        offsets[2 * flat + 1, t, d] = -h
    values = reward_values(program, s, base[None] + offsets, kps, grip_start)
    numeric = ((values[0::2] - values[1::2]) / (2.0 * h)).reshape(horizon, dim)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
