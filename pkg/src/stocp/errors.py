"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class StocpError(Exception):
    """Base class for all errors raised by this package."""


class InputError(StocpError):
    """Invalid data, configuration, or arguments (CLI exit code 2)."""


class NumericalError(StocpError):
    """A numerical procedure failed beyond recovery (CLI exit code 3)."""
