"""Replay a LoRA fusion manifest inside a diffusion pipeline.

Consumes the scheduler's manifest JSON and the two source checkpoints,
verifies their digests, and activates the selected adapter per layer at each
denoising step via duck-typed module handles.
"""

from .errors import (
    AdapterError,
    BindingError,
    CheckpointError,
    DigestMismatchError,
    ManifestError,
    StateError,
)
from .formats import FusionPlan, LoraWeights, read_checkpoint, read_plan, sha256_file
from .session import AdapterSession, load_session

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "AdapterSession",
    "BindingError",
    "CheckpointError",
    "DigestMismatchError",
    "FusionPlan",
    "LoraWeights",
    "ManifestError",
    "StateError",
    "load_session",
    "read_checkpoint",
    "read_plan",
    "sha256_file",
    "__version__",
]
