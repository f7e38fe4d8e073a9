"""Shared exception types, mapped to CLI exit codes."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition. CLI exit code 2."""


class NumericFailure(RuntimeError):
    """A numerical routine failed (singular/ill-conditioned system,
    non-finite loss). CLI exit code 3."""

    def __init__(self, message, frequency_index=None):
        super().__init__(message)
        self.frequency_index = frequency_index
