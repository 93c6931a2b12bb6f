"""Exception types shared across the package."""


class DriftGuardError(Exception):
    pass


class ValidationError(DriftGuardError, ValueError):
    pass


class SchemaError(ValidationError):
    """Input file lacks a required column."""

    def __init__(self, column: str, path=None):
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing column {column!r}{where}")
        self.column = column


class IngestionError(DriftGuardError):
    pass


class FormatVersionError(DriftGuardError):
    pass


class UndefinedMetricError(DriftGuardError, ArithmeticError):
    pass


class InsufficientDataError(DriftGuardError):
    """Not enough observations for a detector; callers treat it as an abstention."""


class DegenerateBaselineError(DriftGuardError):
    """Baseline error is zero, so relative error inflation is undefined."""


class SubsetTooLargeError(ValidationError):
    pass


class StageError(DriftGuardError):
    """A lifecycle stage failed; carries the stage name and a CLI exit code."""

    EXIT_CODES = {
        "config": 2,
        "ingest": 3,
        "train": 4,
        "inject": 5,
        "detect": 6,
        "diagnose": 7,
        "plan": 8,
        "retrain": 9,
        "evaluate": 10,
    }

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return self.EXIT_CODES.get(self.stage, 1)
