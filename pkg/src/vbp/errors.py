"""Exception hierarchy. Each family maps to a CLI exit code."""


class VBPError(Exception):
    exit_code = 1


class UsageError(VBPError):
    exit_code = 1


class DimensionError(UsageError):
    pass


class InsufficientSamplesError(UsageError):
    pass


class PlanError(UsageError):
    pass


class FormatError(VBPError):
    exit_code = 2


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeDisagreementError(FormatError):
    pass


class IntegrityError(VBPError):
    exit_code = 3


class NumericError(VBPError):
    exit_code = 4
