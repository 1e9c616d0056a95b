from typing import Any, Dict, Optional


class StableMaskError(Exception):
    """Root of every error raised by this project."""


class ConfigError(StableMaskError, ValueError):
    pass


class ShapeError(StableMaskError, ValueError):
    pass


class NumericalError(StableMaskError, FloatingPointError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"


class GraphReuseError(StableMaskError, RuntimeError):
    pass


class CacheCorruptedError(StableMaskError, RuntimeError):
    pass


class CheckpointFormatError(StableMaskError, ValueError):
    pass


class VocabularyError(StableMaskError, ValueError):
    pass


class DatasetError(StableMaskError, ValueError):
    pass
