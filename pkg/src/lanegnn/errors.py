class LaneGnnError(Exception):
    """Base class for package errors."""


class ConfigError(LaneGnnError, ValueError):
    """Inconsistent dimensions, bounds or configuration values."""


class UsageError(LaneGnnError, RuntimeError):
    """An API was called in a state that does not allow it."""


class InvariantError(LaneGnnError, ArithmeticError):
    """A numerical invariant (finiteness, positivity) was violated."""


class ScenarioError(LaneGnnError, RuntimeError):
    """A scenario could not be generated from its configuration."""


class TrainingAborted(LaneGnnError, RuntimeError):
    """Training hit a non-finite loss."""
