"""Exception types shared across the package."""


class MedVSRError(Exception):
    """Base class."""


class ContractError(MedVSRError, ValueError):
    """Shapes, lengths or configuration do not satisfy an operation's precondition."""


class DomainError(MedVSRError, ValueError):
    """An argument lies outside the mathematical domain (e.g. non-positive timescale)."""


class NumericError(MedVSRError, ArithmeticError):
    """NaN/inf encountered.  ``diagnostics`` carries whatever context was available."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GapError(ContractError):
    """A frame index is missing from an otherwise contiguous sequence."""

    def __init__(self, index):
        super().__init__(f"missing frame index {index}")
        self.index = index


class UnsupportedConfigError(MedVSRError, ValueError):
    """The requested configuration is not implemented (e.g. scale != 4)."""
