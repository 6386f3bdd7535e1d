"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


class ManifestError(ValueError):
    """A manifest line could not be parsed or failed validation."""


class CheckpointError(RuntimeError):
    """Checkpoint file is truncated, corrupted or from another format version."""


class FreezeViolation(RuntimeError):
    """A parameter that must stay frozen was modified during training."""
