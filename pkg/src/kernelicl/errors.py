"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that violate its contract."""


class DataFormatError(ValueError):
    """A file (CSV, checkpoint) does not conform to the expected format."""
