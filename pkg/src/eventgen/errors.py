"""Exception hierarchy shared across the engine.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented contract: 1 = usage/configuration, 2 = data, 3 = numeric.
"""


class EventGenError(Exception):
    exit_code = 1


class ParameterError(EventGenError):
    """Invalid argument value (bounds, ordering, unknown enum)."""

    exit_code = 1


class OrderingError(ParameterError):
    """Timestep arguments violate the required ordering."""


class DomainError(ParameterError):
    """Numeric input outside the mathematical domain (schedule misconfiguration)."""


class ConfigError(EventGenError):
    """Malformed run config file or unknown config key."""

    exit_code = 1


class UsageError(EventGenError):
    """Bad command-line invocation (mismatched bindings, unknown toggles)."""

    exit_code = 1


class AddressError(EventGenError):
    """A layer address does not exist in the backbone."""

    exit_code = 1


class VocabularyError(EventGenError):
    """Token id or word outside the vocabulary."""

    exit_code = 1


class ShapeError(EventGenError):
    """Tensor or image shape mismatch."""

    exit_code = 2


class DataError(EventGenError):
    """Invalid dataset, manifest, or attention contents."""

    exit_code = 2


class ConsistencyError(EventGenError):
    """Internal caches disagree with the requested schedule."""

    exit_code = 2


class NumericError(EventGenError):
    """Non-finite values where finite ones are required."""

    exit_code = 3


class TrainingError(NumericError):
    """Training diverged; message names the offending step."""
