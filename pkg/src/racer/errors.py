"""Exception hierarchy shared by all racer modules."""


class RacerError(Exception):
    """Base class for every error raised by this package."""


class ClosureError(RacerError):
    pass


class GeometryError(RacerError):
    pass


class ParseError(RacerError):
    """Malformed input file. ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class InfeasibleError(RacerError):
    pass


class EmptyInputError(RacerError):
    pass


class InvalidActionError(RacerError):
    pass


class NumericalError(RacerError):
    pass


class OutsideTrackError(RacerError):
    pass


class DegenerateScanError(RacerError):
    pass


class ConfigError(RacerError):
    pass


class ProtocolError(RacerError):
    pass


class ShapeError(RacerError):
    pass


class ParamError(RacerError):
    pass


class DegenerateSeriesError(RacerError):
    pass


class InsufficientDataError(RacerError):
    pass


class FitError(RacerError):
    pass


class DomainError(RacerError):
    pass
