"""Exception types raised across the package."""


class UltraError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    category = "error"


class ConfigError(UltraError):
    category = "config"


class ContractError(UltraError):
    category = "contract"


class SceneError(UltraError):
    category = "scene"


class CheckpointError(UltraError):
    category = "checkpoint"


class NonFiniteError(UltraError):
    category = "numeric"
