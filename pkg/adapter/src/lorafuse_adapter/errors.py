class AdapterError(Exception):
    """Base class for everything this package raises on purpose."""


class ManifestError(AdapterError):
    """Manifest file is missing, malformed, or an unsupported version."""


class CheckpointError(AdapterError):
    """Checkpoint file is malformed or does not cover the manifest's layers."""


class DigestMismatchError(AdapterError):
    """A checkpoint's SHA-256 does not match the digest the manifest recorded."""


class BindingError(AdapterError):
    """A manifest layer could not be resolved against the module graph."""


class StateError(AdapterError):
    """Session used outside its lifecycle, e.g. stepped past the final step."""
