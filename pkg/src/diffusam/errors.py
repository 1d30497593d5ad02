"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric failures -> 4.
"""


class DiffuSAMError(Exception):
    pass


class ConfigError(DiffuSAMError, ValueError):
    pass


class ShapeError(DiffuSAMError, ValueError):
    pass


class DataError(DiffuSAMError):
    pass


class StoreError(DataError):
    pass


class ManifestError(StoreError):
    pass


class FormatVersionError(StoreError):
    pass


class MissingSliceError(StoreError):
    pass


class DimensionMismatchError(StoreError):
    pass


class MissingVolumesError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing volumes: {', '.join(self.missing)}")


class SourceAccessError(DataError):
    """Raised when a source-free run tries to open a file from a source store."""


class ParamsFormatError(DataError):
    pass


class ParamsVersionError(ParamsFormatError):
    pass


class ArchitectureMismatchError(ParamsFormatError):
    pass


class NumericError(DiffuSAMError):
    pass


class NonFiniteError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, iteration: int, message: str = "non-finite loss"):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")
