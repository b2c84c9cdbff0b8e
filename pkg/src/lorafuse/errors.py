"""Exception taxonomy shared across the package.

The CLI maps LoraFuseError (and I/O errors) to exit code 2; anything else
is an internal error and exits 1.
"""


class LoraFuseError(Exception):
    """Base class for all expected, user-reportable failures."""


class FormatError(LoraFuseError):
    """Malformed container, header, or manifest bytes."""


class DataError(LoraFuseError):
    """Tensor payload carries invalid values (NaN/Inf, bad alpha, ...)."""


class ShapeError(LoraFuseError):
    """Matrix dimensions do not line up."""


class PairingError(LoraFuseError):
    """Adapter factors cannot be paired or two checkpoints share no layers."""


class DegenerateModelError(LoraFuseError):
    """A checkpoint has zero total weight mass, so balancing is undefined."""


class DigestMismatchError(LoraFuseError):
    """A weight file does not match the digest recorded in a manifest."""
