"""Exception hierarchy shared across the package.

The CLI maps the three families to exit codes: ``ConfigError`` -> 2,
``DataError`` -> 3, ``NumericError`` -> 4.
"""


class VdafmError(Exception):
    pass


class ConfigError(VdafmError):
    """Invalid configuration or usage. Carries every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(VdafmError):
    pass


class AllMissing(DataError):
    pass


class DimMismatch(DataError):
    pass


class MissingId(DataError):
    pass


class CorruptFile(DataError):
    pass


class ChecksumMismatch(CorruptFile):
    pass


class InsufficientClassSamples(DataError):
    pass


class SingleClass(DataError):
    pass


class SingleSite(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NumericError(VdafmError):
    pass


class ShapeMismatch(NumericError):
    pass


class NonFinite(NumericError):
    pass


class NotScalar(NumericError):
    pass


class ZeroNorm(NumericError):
    pass


class OutOfRange(NumericError):
    pass
