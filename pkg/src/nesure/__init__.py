"""Noise-level-equivariant self-supervised denoising and measurement-space posterior sampling."""

__version__ = "0.1.0"

from .errors import (AuditViolation, ChecksumError, ConfigError, ContractError, FormatError, NumericError,
                     VersionError)

__all__ = ["__version__", "AuditViolation", "ChecksumError", "ConfigError", "ContractError", "FormatError",
           "NumericError", "VersionError"]
