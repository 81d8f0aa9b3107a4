"""Shared exception types."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or dimensions."""


class FormatError(ValueError):
    """A serialized artifact is malformed (bad magic, truncation, size mismatch)."""


class ConfigError(ValueError):
    """A run configuration is missing keys, has unknown keys, or holds invalid values."""
