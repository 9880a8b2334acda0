"""Exception types shared across the package."""


class AdvSkillError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvSkillError, ValueError):
    """Bad configuration: shape mismatch, unknown key, unknown kind, etc."""


class UsageError(AdvSkillError, RuntimeError):
    """An API was called out of order or with an incompatible argument."""


class OptimizationError(AdvSkillError, FloatingPointError):
    """Non-finite gradients reached an optimizer."""


class SimulationFault(AdvSkillError, FloatingPointError):
    """The simulator produced or received non-finite values."""


class TrainingFault(AdvSkillError, FloatingPointError):
    """A loss or reward became non-finite during training."""
