"""Exception hierarchy used across the package."""

from __future__ import annotations


class SnellVIError(Exception):
    """Base class for all package errors."""


class ConfigError(SnellVIError, ValueError):
    """Invalid or incomplete configuration (unknown family, missing parameter, bad key)."""


class ModelError(SnellVIError, ValueError):
    """A model coefficient evaluated to a non-finite or otherwise invalid value."""


class GridError(SnellVIError, ValueError):
    """The space-time grid is malformed or too small for the requested stencil."""


class NonFiniteStateError(SnellVIError, FloatingPointError):
    """A simulated path left the finite reals.

    Attributes
    ----------
    step, path:
        Time-step index and (global) path index of the first offending entry.
    """

    def __init__(self, message: str, step: int, path: int):
        super().__init__(message)
        self.step = step
        self.path = path


class ConvergenceError(SnellVIError, RuntimeError):
    """PSOR failed to reach the requested tolerance at a time level."""

    def __init__(self, message: str, level: int, residual: float):
        super().__init__(message)
        self.level = level
        self.residual = residual


class MismatchError(SnellVIError, ValueError):
    """Two objects that must share nodes (surface and batch, flow and batch) do not."""
