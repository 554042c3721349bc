"""Exception types raised across the package."""


class StateRectError(Exception):
    """Base class for all package errors."""


class DegenerateNorm(StateRectError, ValueError):
    pass


class ConfigError(StateRectError, ValueError):
    pass


class FormatError(StateRectError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AssignmentOutOfRange(StateRectError, IndexError):
    pass


class IndexOutOfRange(StateRectError, IndexError):
    pass


class AllNullified(StateRectError, ValueError):
    pass


class NullifiedClass(StateRectError, ValueError):
    pass


class TooFewPoints(StateRectError, ValueError):
    pass


class NonFiniteLoss(StateRectError, FloatingPointError):
    def __init__(self, iteration, message="non-finite loss"):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")


class NoValidGallery(StateRectError, ValueError):
    pass
