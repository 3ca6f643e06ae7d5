"""Custom exceptions for the MacCap toolkit."""

class MacCapException(Exception):
    """Base exception for MacCap errors."""
    pass


class InvalidArgumentException(MacCapException, ValueError):
    """Raised when an operation receives an argument outside its contract."""
    pass


class ConfigurationException(MacCapException):
    """Exception raised for configuration errors."""
    pass


class BackendUnavailableException(MacCapException):
    """Raised when an optional real-weight backend cannot be loaded."""
    def __init__(self, backend: str, message: str, original_error: Exception = None):
        self.backend = backend
        self.original_error = original_error
        super().__init__(f"Backend '{backend}' unavailable: {message}")


class CorpusIOException(MacCapException):
    """Raised when a corpus or manifest file cannot be read."""
    def __init__(self, path: str, message: str, original_error: Exception = None):
        self.path = path
        self.original_error = original_error
        super().__init__(f"Failed to read {path}: {message}")


class InvalidCorpusException(MacCapException):
    """Raised when no caption survives corpus filtering."""
    def __init__(self, path: str, kept: int = 0, dropped: int = 0):
        self.path = path
        self.kept = kept
        self.dropped = dropped
        super().__init__(f"Corpus {path} is empty after filtering ({kept} kept, {dropped} dropped)")


class NumericFailureException(MacCapException):
    """Raised when a loss or gradient becomes non-finite."""
    def __init__(self, operation: str, message: str, diagnostics: dict = None):
        self.operation = operation
        self.diagnostics = diagnostics or {}
        super().__init__(f"Numeric failure in {operation}: {message}")


class CheckpointFormatException(MacCapException):
    """Raised for corrupt or truncated checkpoint files."""
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"Invalid checkpoint {path}: {message}")


class IncompatibleCheckpointException(MacCapException):
    """Raised when a checkpoint was trained against different backbone/LM specs."""
    def __init__(self, field: str, expected: str, found: str):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"Checkpoint {field} mismatch: expected {expected}, found {found}")


class FrozenWeightsException(MacCapException):
    """Raised when a frozen component's weights changed during training."""
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"Frozen {component} weights were modified during training")


class InsufficientCorpusException(MacCapException):
    """Raised when a corpus-level metric has too few items."""
    pass


class NoAnswerException(MacCapException):
    """Raised when the language model produced no answer text."""
    pass
