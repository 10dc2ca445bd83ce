"""Exception hierarchy.

Every error raised on purpose by abckit derives from :class:`AbcError`.  The
three intermediate classes map onto the CLI exit codes (2 config, 3 data,
4 compute).
"""


class AbcError(Exception):
    exit_code = 1


class ConfigError(AbcError, ValueError):
    exit_code = 2

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors or [message])


class DataError(AbcError, ValueError):
    exit_code = 3


class ComputeError(AbcError, RuntimeError):
    exit_code = 4


class InvalidWeight(ConfigError):
    pass


class CapacityExceeded(ConfigError):
    pass


class UnknownSource(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class EmptyMask(ComputeError, ValueError):
    pass


class TrainingDiverged(ComputeError):
    def __init__(self, epoch, member=None):
        where = f" (member {member})" if member is not None else ""
        super().__init__(f"training loss became non-finite at epoch {epoch}{where}")
        self.epoch = epoch
        self.member = member


class NonFiniteError(ComputeError):
    def __init__(self, what, step):
        super().__init__(f"non-finite {what} at sampling step {step}")
        self.step = step
