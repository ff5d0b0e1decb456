"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands live in truncated spaces of different dimension."""


class EmptySectorError(ValueError):
    """A parity projection removed (almost) all of the state's weight."""


class TrajectoryAbort(RuntimeError):
    """The stochastic integrator produced an unusable state.

    Carries the control-step index at which the failure was detected so
    callers can log the incident and decide whether to re-reset.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class ConfigError(ValueError):
    """A run configuration file or override is invalid."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointCorruptError(CheckpointError):
    """File is truncated or does not carry the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes do not match the requested configuration."""
