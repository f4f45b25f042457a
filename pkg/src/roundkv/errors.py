"""Exception hierarchy.

``InputError`` subclasses map to CLI exit code 2 (bad user input);
``InvariantError`` maps to exit code 3 (internal invariant violated).
"""


class RoundKVError(Exception):
    """Base class for all errors raised by this package."""


class InputError(RoundKVError):
    """Invalid user-supplied input (files, parameters, config)."""


class ParseError(InputError):
    """Malformed or structurally invalid conversation document."""


class TraceError(InputError):
    """Malformed or corrupt attention trace."""


class ConfigError(InputError):
    """Invalid run configuration or flag combination."""


class DomainError(InputError):
    """Numeric or shape argument outside its documented domain."""


class CapacityError(RoundKVError):
    """Device tier capacity exceeded."""


class ConsistencyError(RoundKVError):
    """Tiered-store misuse: duplicate block, fetch of a dropped block."""


class InvariantError(RoundKVError):
    """An internal invariant failed to hold."""
