"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract, so raising the right
class matters more than the message text.
"""


class VfsegError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(VfsegError):
    """Invalid configuration value or unusable combination of settings."""


class ValidationError(VfsegError):
    """Input data violates a documented contract (non-binary mask, duplicate ids, ...)."""


class DimensionError(VfsegError):
    """Tensor extents incompatible with the requested operation."""


class StateError(VfsegError):
    """Operation invoked in the wrong phase (e.g. backward without a cached forward)."""


class DataError(VfsegError):
    """Missing or unreadable sample data."""


class ProtocolError(VfsegError):
    """Wire-format violation, negotiation mismatch, or transport failure.

    ``offset`` points at the offending byte within the buffer being
    decoded, when that is known.
    """

    def __init__(self, message: str, *, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


class TransportError(ProtocolError):
    """Connection-level failure: refused, closed, or timed out.

    The only protocol failure worth retrying; everything else is a
    negotiation or integrity problem that a reconnect cannot fix.
    """


class AuthenticationError(ProtocolError):
    """AEAD tag verification failed; the frame must be discarded."""


class NumericError(VfsegError):
    """Numeric check failed (gradient mismatch, non-finite values)."""
