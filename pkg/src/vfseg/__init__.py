"""Two-party vertical federated image segmentation."""

from .errors import (
    AuthenticationError,
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
    ProtocolError,
    StateError,
    TransportError,
    ValidationError,
    VfsegError,
)

__version__ = "0.1.0"

__all__ = [
    "AuthenticationError",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "NumericError",
    "ProtocolError",
    "StateError",
    "TransportError",
    "ValidationError",
    "VfsegError",
    "__version__",
]
