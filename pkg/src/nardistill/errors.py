class ConfigError(ValueError):
    """Invalid configuration; raised before any compute starts."""


class DataError(ValueError):
    """Unreadable or malformed input data."""
