from __future__ import annotations

from typing import Any


class SteerkitError(Exception):
    """Base class for every error raised by steerkit."""


class ConfigError(SteerkitError, ValueError):
    """Raised when a configuration value is outside its valid range. Subclass of ValueError."""

    def __init__(self, field: str, value: Any, expected: str) -> None:
        self.field = field
        self.value = value
        super().__init__(f"Invalid {field}: {value!r}. Expected {expected}.")


class DomainError(SteerkitError, ValueError):
    """Raised when a step index lies outside the domain of a velocity or noise field."""

    def __init__(self, value: float, message: str) -> None:
        self.value = value
        super().__init__(message)


class PolicyDocumentError(SteerkitError, ValueError):
    """Raised when a serialized policy document is malformed."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"Invalid policy document at {path}: {message}")


class FitError(SteerkitError, ValueError):
    """Raised when a mixture cannot be fitted to the supplied demonstrations."""


class RewardSyntaxError(SteerkitError, ValueError):
    """Raised when reward program text cannot be parsed or fails validation."""

    def __init__(self, message: str, line: int, column: int) -> None:
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"{message} (line {line}, column {column})")


class RewardEvaluationError(SteerkitError, ArithmeticError):
    """Raised when a reward evaluates to NaN or infinity. ``node`` is the printed sub-expression."""

    def __init__(self, node: str, stage: str) -> None:
        self.node = node
        self.stage = stage
        super().__init__(f"Non-finite value in stage {stage!r} at node: {node}")


class PlanningError(SteerkitError, RuntimeError):
    """Raised when a stage planner cannot produce or revise a reward program."""

    def __init__(self, planner: str, message: str) -> None:
        self.planner = planner
        super().__init__(f"{planner} planner failed: {message}")


class GroundingError(SteerkitError, LookupError):
    """Raised when a task references a label that does not exist in the scene."""

    def __init__(self, label: str) -> None:
        self.label = label
        super().__init__(f"Cannot ground label {label!r}: no such entity in the scene.")


class SceneValidationError(SteerkitError, ValueError):
    """Raised when a scene, task or perturbation document violates its schema."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class PerturbationError(SteerkitError, RuntimeError):
    """Raised when a perturbation cannot be realized within the workspace."""

    def __init__(self, kind: str, attempts: int, message: str | None = None) -> None:
        self.kind = kind
        self.attempts = attempts
        super().__init__(
            message or f"Perturbation {kind!r} found no feasible placement after {attempts} attempts."
        )


class DemoGenerationError(SteerkitError, RuntimeError):
    """Raised when the scripted expert fails on more than half of its rollouts."""

    def __init__(self, accepted: int, attempted: int) -> None:
        self.accepted = accepted
        self.attempted = attempted
        super().__init__(
            f"Scripted expert succeeded on only {accepted} of {attempted} rollouts; "
            "task and generation parameters look inconsistent."
        )
