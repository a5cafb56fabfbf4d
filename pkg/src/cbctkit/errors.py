"""Exception hierarchy shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ToolkitError):
    """Invalid configuration or invalid argument values (CLI exit code 1)."""


class HeaderError(ToolkitError):
    """File header missing, unparseable, or inconsistent."""


class PayloadMismatchError(ToolkitError):
    """Raw payload length does not match what the header promises."""


class UnitError(ToolkitError):
    """Operation applied to a volume with the wrong value-unit tag."""


class DivergenceError(ToolkitError):
    """Non-finite values encountered during training or sampling."""
