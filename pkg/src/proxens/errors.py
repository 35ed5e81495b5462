"""Exception hierarchy.

Everything raised on purpose by this package derives from ``ProxensError``.
The CLI maps ``ConfigError`` to exit code 1 and ``DataError`` to exit code 2.
"""


class ProxensError(Exception):
    pass


class ConfigError(ProxensError):
    pass


class DataError(ProxensError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OrderingError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class SplitError(DataError):
    pass


class DegenerateColumnError(DataError):
    def __init__(self, column, step=None):
        self.column = column
        self.step = step
        where = f" at dynamic step {step}" if step is not None else ""
        super().__init__(f"column {column!r} is constant over the fitting rows{where}")


class ShapeError(ProxensError, ValueError):
    pass


class SingularityError(ProxensError):
    pass


class NotFittedError(ProxensError):
    pass


class DegenerateTestError(ProxensError, ValueError):
    pass


class GridTooLargeError(ProxensError):
    def __init__(self, size, cap):
        self.size = size
        self.cap = cap
        super().__init__(f"grid has {size} points, exceeding the cap of {cap}")
