"""Exception hierarchy.

Everything the CLI treats as bad input derives from ``ValidationError``
(exit code 1); floating point failures raise ``NumericError`` (exit code 2).
"""


class PFANError(Exception):
    pass


class ValidationError(PFANError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class VocabularyError(ValidationError):
    pass


class RejectedRegionError(ValidationError):
    def __init__(self, region_id, message="region is empty after clipping"):
        super().__init__(f"region {region_id}: {message}")
        self.region_id = region_id


class CorruptFileError(ValidationError):
    pass


class ConfigMismatchError(ValidationError):
    pass


class NumericError(PFANError, ArithmeticError):
    pass
