"""Exception types shared across the package."""


class ShillforgeError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(ShillforgeError):
    """An operation was called with arguments that break its contract."""


class DomainError(ShillforgeError):
    """A numeric primitive was evaluated outside its mathematical domain."""


class ValidationError(ShillforgeError):
    """Input data failed a structural or semantic check."""


class ParseError(ValidationError):
    """A text input could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingError(ShillforgeError):
    """Training produced a non-finite loss or otherwise failed."""


class AttackError(ShillforgeError):
    """Attack optimization diverged; carries the last finite rating tensor."""

    def __init__(self, message, last_tensor=None):
        super().__init__(message)
        self.last_tensor = last_tensor
