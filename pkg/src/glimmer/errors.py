class ShapeError(ValueError):
    """Raised when tensor dimensions violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid model configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(ValueError):
    """Malformed or corrupted file (tensor, checkpoint, image, manifest)."""


class DataError(ValueError):
    """Dataset or manifest problem (missing file, bad label, mismatched shape)."""
