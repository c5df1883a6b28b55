"""Exception hierarchy shared by all pipeline stages."""


class IrVulnError(Exception):
    """Base class for every error raised by this package."""


class DataError(IrVulnError):
    """Bad input data. The CLI maps these to exit code 1."""


class ConfigError(IrVulnError, ValueError):
    """Invalid configuration value."""


class MalformedFunctionBlock(DataError):
    pass


class LabelOnRemovedLine(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class MalformedSequence(DataError):
    pass


class ParseError(DataError):
    pass


class InvariantViolation(DataError):
    pass


class EmptyClass(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class ShapeMismatch(IrVulnError, ValueError):
    pass


class IdOutOfRange(IrVulnError, IndexError):
    pass


class OddDimension(ConfigError):
    pass


class NonFiniteGradient(IrVulnError, ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
