"""Exception types raised across the package.

Each maps onto one CLI exit code (see :mod:`artikin.cli`).
"""


class ArtikinError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidInputError(ArtikinError, ValueError):
    """Arguments violate a documented precondition."""

    exit_code = 2


class ParseError(InvalidInputError):
    """A track, rig, model or report file is malformed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DegenerateGeometryError(ArtikinError):
    """Geometry too degenerate for the requested fit.

    ``rank`` carries the numerical rank of the offending matrix when known.
    """

    exit_code = 3

    def __init__(self, message, rank=None):
        self.rank = rank
        if rank is not None:
            message = f"{message} (rank {rank})"
        super().__init__(message)


class DegenerateTrackError(DegenerateGeometryError):
    """A trajectory has too few visible samples to be used."""

    def __init__(self, message, point_index=None):
        self.point_index = point_index
        super().__init__(message)


class DivergenceError(ArtikinError):
    """Refinement loss blew up past the divergence guard."""

    exit_code = 4
