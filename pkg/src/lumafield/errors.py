"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class LumafieldError(Exception):
    """Base class for all errors raised by lumafield."""


class ConfigError(LumafieldError):
    """Invalid configuration or usage (CLI exit code 2)."""


class AssetError(LumafieldError):
    """Missing, unreadable or malformed asset file (CLI exit code 3)."""


class CheckpointError(AssetError):
    """Checkpoint file that cannot be restored."""


class NumericalError(LumafieldError):
    """Non-finite values during training or rendering (CLI exit code 4)."""
