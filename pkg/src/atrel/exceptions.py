"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from
:class:`AtrelError` so that callers (and the command line front end) can
map failures onto a small set of categories: configuration / usage
problems, data problems, and numerical failures.
"""

from __future__ import annotations


class AtrelError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(AtrelError):
    """Invalid configuration value (bad bandwidth, fold count, selector...)."""


class DomainError(AtrelError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StateError(AtrelError, RuntimeError):
    """Operation invoked before the object reached the required state."""


class ConvergenceError(AtrelError):
    """An iterative solver failed to reach its tolerance.

    Carries the last iterate and the residual norm at that iterate so the
    failure can be diagnosed (and so bootstrap machinery can count and
    drop failed resamples without losing information).
    """

    def __init__(self, message, last_iterate=None, residual_norm=None, context=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm
        self.context = dict(context or {})


class NoRootError(AtrelError):
    """Bracketed scalar solve found no sign change after expansion."""


class CalibrationError(AtrelError):
    """A local calibration equation is ill-posed at an evaluation point."""

    def __init__(self, message, point=None, context=None):
        super().__init__(message)
        self.point = point
        self.context = dict(context or {})


class IngestionError(AtrelError):
    """CSV / schema problem. Identifies file, line and column when known."""

    def __init__(self, message, path=None, line=None, column=None):
        parts = [message]
        loc = ", ".join(
            f"{k}={v}" for k, v in (("file", path), ("line", line), ("column", column))
            if v is not None
        )
        if loc:
            parts.append(f"({loc})")
        super().__init__(" ".join(parts))
        self.path = path
        self.line = line
        self.column = column


class MetricError(AtrelError):
    """Metric undefined on the supplied inputs (single-class labels, ...)."""


class GeneratorError(AtrelError):
    """Simulation generator exceeded its draw budget or is degenerate."""


class InferenceError(AtrelError):
    """Bootstrap inference invalidated (too many failed resamples)."""
