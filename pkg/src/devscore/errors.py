"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: usage problems exit 1, configuration
and data-contract problems exit 2, numeric divergence exits 3.
"""


class DevscoreError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DevscoreError):
    """A configuration value is out of its documented range."""


class ContractError(DevscoreError):
    """An input violates a documented precondition."""


class DimensionError(ContractError):
    """Array shapes do not line up; message names the offending block."""


class ParseError(DevscoreError):
    """A file could not be decoded; message carries the byte offset."""


class NumericError(DevscoreError):
    """A computation produced a non-finite value."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss or gradient.

    Carries the last parameters that produced a finite loss so callers can
    checkpoint them before giving up.
    """

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history
