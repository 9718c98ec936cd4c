"""Exception hierarchy shared by every dmdp module."""


class DMDPError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(DMDPError, ValueError):
    """An input broke a documented shape or range contract."""


class DegenerateMaskError(ContractViolation):
    pass


class NumericInstabilityError(DMDPError, ArithmeticError):
    pass


class DepthError(ContractViolation):
    pass


class ConfigurationError(DMDPError, ValueError):
    pass


class FrozenParameterError(DMDPError, RuntimeError):
    pass


class DegenerateContrastiveError(ContractViolation):
    pass


class SamplingError(DMDPError, ValueError):
    pass


class ValidationError(DMDPError, ValueError):
    pass


class ManifestParseError(ValidationError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
