"""Exception hierarchy for the estimator package."""


class BclsError(Exception):
    """Base class for every error raised by the package."""


class ExpressionSyntaxError(BclsError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class UnknownIdentifierError(ExpressionSyntaxError):
    def __init__(self, name: str, position: int, text: str = ""):
        self.name = name
        super().__init__(f"Unknown identifier '{name}'", position, text)


class InvalidExponentError(ExpressionSyntaxError):
    pass


class EvaluationError(BclsError):
    """Raised when a basis expression cannot be evaluated (division by zero)."""

    def __init__(self, message: str, subexpression: str):
        self.subexpression = subexpression
        super().__init__(f"{message}: {subexpression}")


class UnknownModelError(BclsError):
    pass


class ModelFileError(BclsError):
    """Every problem found in a model file, reported together."""

    def __init__(self, path: str, problems: list[str]):
        self.path = path
        self.problems = problems
        listing = "\n".join(f"  - {p}" for p in problems)
        super().__init__(f"Invalid model file {path}:\n{listing}")


class DataFileError(BclsError):
    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class NoiseCorrectionError(BclsError):
    pass


class NonPolynomialUnderGaussianNoise(NoiseCorrectionError):
    pass


class UnsupportedLogNormalForm(NoiseCorrectionError):
    pass


class InsufficientDataError(BclsError):
    pass


class NonPositiveDataError(BclsError):
    pass


class QuadratureError(BclsError):
    pass


class MalformedStageError(BclsError):
    pass


class MissingPriorError(BclsError):
    pass


class RankDeficientError(BclsError):
    """Design matrix is (numerically) rank deficient; the stage is not identifiable."""

    def __init__(self, rank: int, columns: int, labels: list[str] | None = None):
        self.rank = rank
        self.columns = columns
        self.labels = labels or []
        super().__init__(
            f"Design matrix is rank deficient (rank {rank} < {columns} columns"
            + (f": {', '.join(self.labels)})" if self.labels else ")")
            + "; data may be in equilibrium"
        )


class StageError(BclsError):
    def __init__(self, stage_index: int, cause: BclsError):
        self.stage_index = stage_index
        self.cause = cause
        super().__init__(f"Stage {stage_index + 1} failed: {cause}")


class NonFiniteStateError(BclsError):
    def __init__(self, t: float):
        self.t = t
        super().__init__(f"ODE solution became non-finite at t={t:g}")


class ConfigError(BclsError):
    """All configuration violations found for a command."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class InvalidDataError(BclsError):
    """Time-series data violates its invariants (shape, ordering, finiteness)."""


class MissingParameterError(BclsError):
    def __init__(self, names: list[str]):
        self.names = names
        super().__init__(f"Missing values for: {', '.join(names)}")
