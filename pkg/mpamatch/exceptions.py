"""
Custom exceptions for mpamatch.

All exceptions inherit from MPAMatchError for easy exception handling. Each carries the
process exit code the command line reports for it.
"""


class MPAMatchError(Exception):
    """Base exception for all mpamatch errors."""

    def __init__(self, message: str, exit_code: int = 1) -> None:
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)


class ConfigError(MPAMatchError):
    """Raised when a configuration, prompt file or adapter setup is invalid (exit 2)."""

    def __init__(self, message: str = "Invalid configuration") -> None:
        super().__init__(message, exit_code=2)


class DataError(MPAMatchError):
    """Raised when dataset ingestion or splitting fails (exit 3)."""

    def __init__(self, message: str = "Dataset error") -> None:
        super().__init__(message, exit_code=3)


class EmptyManifestError(DataError):
    """Raised when a dataset root contains no images."""

    def __init__(self, message: str = "No images found") -> None:
        super().__init__(message)


class MissingMaskError(DataError):
    """Raised when a labeled image has no mask."""

    def __init__(self, message: str = "Missing mask for labeled image") -> None:
        super().__init__(message)


class PaletteError(DataError):
    """Raised when mask values fall outside the configured palette."""

    def __init__(self, message: str = "Mask values outside palette", offenders=None) -> None:
        self.offenders: dict[str, list[int]] = dict(offenders or {})
        super().__init__(message)


class SplitError(DataError):
    """Raised when a split cannot satisfy its stratification contract."""

    def __init__(self, message: str = "Split failed") -> None:
        super().__init__(message)


class ShapeError(MPAMatchError):
    """Raised when tensor geometry does not match the declared specs."""

    def __init__(self, message: str = "Shape mismatch") -> None:
        super().__init__(message, exit_code=1)


class ValidationError(MPAMatchError):
    """Raised when tensor or mask values are non-finite or out of range."""

    def __init__(self, message: str = "Validation failed") -> None:
        super().__init__(message, exit_code=1)


class InitializationError(MPAMatchError):
    """Raised when a prototype bank cannot be initialized."""

    def __init__(self, message: str = "Prototype initialization failed") -> None:
        super().__init__(message, exit_code=1)


class NumericAbort(MPAMatchError):
    """Raised when a loss component becomes non-finite during training (exit 4)."""

    def __init__(self, component: str, step: int | None = None) -> None:
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite loss component '{component}'{where}", exit_code=4)
