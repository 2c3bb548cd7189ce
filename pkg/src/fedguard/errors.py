"""Exception types with stable error codes for the CLI."""


class FedguardError(Exception):
    """Base class for package-specific failures."""

    code = "E_GENERIC"


class FormatError(FedguardError):
    """Malformed or inconsistent on-disk data (fingerprint files, checkpoints)."""

    code = "E_FORMAT"


class ConfigError(FedguardError):
    """Invalid experiment configuration (unknown key, bad value, missing input)."""

    code = "E_CONFIG"


def error_code(exc: BaseException) -> str:
    """Map an exception to the single-token code emitted by the CLI."""
    if isinstance(exc, FedguardError):
        return exc.code
    if isinstance(exc, (ValueError, KeyError)):
        return "E_VALUE"
    if isinstance(exc, FileNotFoundError):
        return "E_MISSING_FILE"
    if isinstance(exc, OSError):
        return "E_IO"
    return "E_INTERNAL"
