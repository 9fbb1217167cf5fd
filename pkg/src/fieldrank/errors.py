"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, out-of-range hyperparameters, mismatched wiring."""


class DataError(ValueError):
    """Invalid input data: malformed corpus files, unknown ids, empty queries."""
