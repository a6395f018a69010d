"""Exception hierarchy shared by the estimation modules and the command line tool."""


class MqmixError(Exception):
    """Base class for all package errors."""


class ConfigError(MqmixError):
    """Invalid run configuration (bad flag values, malformed config file)."""


class DataError(MqmixError):
    """Invalid or unusable input data."""


class ParseError(DataError):
    """Malformed input file; carries the offending row when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DomainError(MqmixError):
    """Argument outside the mathematical domain of a function."""


class NumericalError(MqmixError):
    """Estimation failed for numerical reasons."""


class SingularSystemError(NumericalError):
    """Weighted normal equations were singular beyond repair."""


class ScaleUpdateError(NumericalError):
    """The scale profile equation could not be bracketed or solved."""


class DegenerateComponentError(NumericalError):
    """A mixture component lost essentially all of its mass."""


class MultiStartError(NumericalError):
    """Every start of a multi-start run raised; carries the per-start errors."""

    def __init__(self, causes: list[BaseException]):
        self.causes = causes
        detail = "; ".join(f"start {i}: {c}" for i, c in enumerate(causes))
        super().__init__(f"all {len(causes)} starts failed ({detail})")


class NoAdmissibleModelError(MqmixError):
    """No candidate in a selection sweep passed the admissibility filter."""
