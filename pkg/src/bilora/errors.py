"""Exception types shared across the package."""


class BiloraError(Exception):
    """Base class for all package errors."""


class DimensionError(BiloraError, ValueError):
    pass


class ContractError(BiloraError, ValueError):
    """A documented precondition was violated."""


class NumericError(BiloraError, ArithmeticError):
    pass


class ConfigError(BiloraError, ValueError):
    pass


class FormatError(BiloraError, ValueError):
    """A file on disk does not have the expected layout."""


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ManifestError(BiloraError, ValueError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)


class EmptyEvaluationError(BiloraError, ValueError):
    pass
