"""Errors raised by the keyword spotting engine."""


class KWSError(Exception):
    """Base class of every error raised by this package."""


class DimensionError(KWSError, ValueError):
    pass


class NumericError(KWSError, ArithmeticError):
    pass


class ConfigurationError(KWSError):
    pass


class IngestionError(KWSError):
    pass


class SpecParseError(KWSError):
    """
    Raised while reading an architecture description file.

    lineno -- 1-based line number of the offending line (None for file-level
              problems)
    """
    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        location = ''
        if path is not None:
            location = '%s:' % path
        if lineno is not None:
            location += '%d:' % lineno
        if location:
            message = '%s %s' % (location, message)
        super(SpecParseError, self).__init__(message)


class ModelFormatError(KWSError):
    pass


class DivergenceError(KWSError, ArithmeticError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super(DivergenceError, self).__init__(
            'training diverged at step %d (loss=%r)' % (step, loss))


class VerificationError(KWSError):
    """
    Raised when a golden table or gradient check fails.

    failures -- list of the failing rows, as produced by the check
    """
    def __init__(self, message, failures=()):
        self.failures = list(failures)
        super(VerificationError, self).__init__(message)
