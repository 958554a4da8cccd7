"""Exception hierarchy shared by every ldguid module."""


class LDGuidError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(LDGuidError, ValueError):
    pass


# dataio
class MissingDirectory(LDGuidError, FileNotFoundError):
    pass


class NameMismatch(LDGuidError, ValueError):
    pass


class UnsupportedFormat(LDGuidError, ValueError):
    pass


class InvalidChannelIndex(LDGuidError, IndexError):
    pass


class DegenerateConfig(LDGuidError, ValueError):
    pass


class ZeroStd(LDGuidError, ValueError):
    pass


# de / backbones
class InvalidArch(LDGuidError, ValueError):
    pass


class ModeMismatch(LDGuidError, ValueError):
    pass


# objectives
class EmptyBatch(LDGuidError, ValueError):
    pass


class NonFiniteGradient(LDGuidError, ArithmeticError):
    pass


# trainer
class EmptyDataset(LDGuidError, ValueError):
    pass


class NonFiniteLoss(LDGuidError, ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class MissingDE(LDGuidError, ValueError):
    pass


class CheckpointError(LDGuidError, IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass


# evalkit
class TooFewSamples(LDGuidError, ValueError):
    pass


# cli
class ConfigError(LDGuidError, ValueError):
    pass


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass
