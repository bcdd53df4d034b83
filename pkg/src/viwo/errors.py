"""Exception hierarchy. CLI exit codes hang off the top-level classes."""


class ViwoError(Exception):
    pass


class ConfigError(ViwoError):
    """Bad or missing configuration (exit code 2)."""


class DataError(ViwoError):
    """Malformed or insufficient input data (exit code 3)."""


class GapError(DataError):
    def __init__(self, stream, t0, t1, limit):
        self.stream, self.t0, self.t1, self.limit = stream, t0, t1, limit
        super().__init__(f"{stream} gap of {t1 - t0:.6f} s in [{t0:.6f}, {t1:.6f}] exceeds {limit:.6f} s")


class ExtrapolationError(DataError):
    pass


class RejectedSampleError(DataError):
    pass


class AlignmentError(DataError):
    pass


class RepropagationRequired(ViwoError):
    """Bias moved too far from the preintegration linearization point."""


class DegenerateGeometryError(ViwoError):
    pass


class FactorError(ViwoError):
    """A factor produced a non-finite residual."""

    def __init__(self, factor, message="non-finite residual"):
        self.factor = factor
        super().__init__(f"{factor}: {message}")


class MarginalizationError(ViwoError):
    pass


class DivergenceError(ViwoError):
    """Solver failure; ``states`` holds the last good estimate."""

    def __init__(self, message, states=None):
        self.states = states
        super().__init__(message)


class InitializationError(ViwoError):
    pass


class InsufficientExcitationError(InitializationError):
    pass


class InternalConsistencyError(ViwoError):
    pass
