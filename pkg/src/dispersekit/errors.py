"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``dispersekit.cli``).
"""


class DispersekitError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DispersekitError, ValueError):
    """Non-finite entries, bad shapes or unparsable files."""


class DegenerateBatchError(DispersekitError, ValueError):
    """A pairwise quantity was requested on a batch with fewer than two rows."""


class NormalizationError(DegenerateBatchError):
    """A row is too close to zero to be normalized for cosine dissimilarity."""


class PairingError(InvalidInputError):
    """A positive pairing refers outside the batch or maps an anchor to itself."""


class OracleFailureError(DispersekitError, ArithmeticError):
    """The finite-difference oracle hit a non-finite function value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractViolationError(DispersekitError, RuntimeError):
    """A proven numerical property failed to hold."""


class ConfigError(InvalidInputError):
    """A JSON config failed validation; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class DivergenceError(DispersekitError, FloatingPointError):
    """Training loss became non-finite or blew past the guard threshold."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
