"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, dimensions or usage."""


class SimulatorMismatchError(ConfigError):
    """An intervention kind was routed to a simulator that cannot execute it."""


class NumericalError(RuntimeError):
    """Training or inference produced NaN/Inf where finite values are required."""
