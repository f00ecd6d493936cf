"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A parameter or object violates its declared constraints."""


class ValidationError(ValueError):
    """Input data breaks a structural invariant (ordering, ranges, lengths)."""


class CsvParseError(ValueError):
    """A CSV file is malformed; carries the offending 1-based line number."""

    def __init__(self, path, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class NoDetectionError(RuntimeError):
    """No credible correlation peak; the ranging slot should be marked missing."""


class ModelFormatError(ValueError):
    """A serialized model file is unreadable (bad magic, version, or truncation)."""


class StateError(RuntimeError):
    """A state machine was driven with an invalid transition (e.g. time regression)."""
