"""Exception types shared across the package."""


class ProtocloudError(Exception):
    pass


class ShapeError(ProtocloudError, ValueError):
    pass


class ConfigError(ProtocloudError, ValueError):
    pass


class UsageError(ProtocloudError, ValueError):
    pass


class SolverError(ProtocloudError, RuntimeError):
    pass


class ProjectionError(SolverError):
    pass


class FeasibilityError(SolverError):
    """A transport plan violated its marginal constraints."""


class TrainingError(ProtocloudError, RuntimeError):
    pass


class SchemaError(ProtocloudError, ValueError):
    pass


class MetricError(ProtocloudError, ValueError):
    pass


class ParseError(ProtocloudError, ValueError):
    """SMILES syntax error; ``offset`` is the 0-based character position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset
