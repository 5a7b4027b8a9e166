"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions (shape, range, index)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or cannot proceed numerically."""


class FormatError(OSError):
    """A persisted file is malformed: bad magic, unknown version, truncation, or CRC mismatch."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class AuditViolation(RuntimeError):
    """Clean images were read from inside a self-supervised training scope."""


class ConfigError(ValueError):
    pass
