"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when shapes, dimensions, or configuration values are inconsistent."""


class ValidationError(ValueError):
    """Raised when input data violates a documented precondition."""


class ManifestError(ValueError):
    """Raised on malformed manifest files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(ArithmeticError):
    """Raised when a non-finite value appears inside the network.

    ``layer_index`` identifies the layer whose output first went non-finite.
    """

    def __init__(self, message: str, layer_index: int):
        self.layer_index = layer_index
        super().__init__(f"{message} (layer {layer_index})")


class StateError(RuntimeError):
    """Raised when an operation is requested on incomplete run state."""
