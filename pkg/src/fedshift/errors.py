"""Exception hierarchy shared across the package."""


class FedshiftError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(FedshiftError):
    """Invalid configuration: bad field values, dimension mismatches, missing keys."""


class ParseError(ConfigurationError):
    """A data or config file could not be parsed; message carries the line number."""


class NumericError(FedshiftError):
    """A computation produced non-finite values; message names the offending item."""
