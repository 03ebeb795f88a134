"""Exception taxonomy shared across the package.

Domain errors mean the caller handed us something structurally invalid
(bad knob index, mismatched graph, malformed config file).  Numeric errors
mean an algorithm failed internally (factorization blew up, divergence).
The CLI maps the two onto distinct exit codes.
"""


class DomainError(ValueError):
    """Invalid input from the caller's side: bad index, shape, or schema."""


class ConfigError(DomainError):
    """Malformed or inconsistent configuration (files, flags, plans)."""


class NumericError(RuntimeError):
    """Numerical failure that survived all recovery attempts."""
