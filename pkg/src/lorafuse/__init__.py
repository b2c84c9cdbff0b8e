"""Training-free fusion of two LoRA adapters by per-layer top-K selection.

At every denoising step and for every paired layer, the adapter whose weight
update carries more mass in its K largest absolute elements wins that layer,
after a global balance factor and a step-dependent scale tilt the comparison
from content early to style late. The package parses safetensors LoRA
checkpoints, builds the full (layer x step) selection grid, and exports it as
a canonical JSON manifest, per-step merged checkpoints, and heatmap images.
"""

from .errors import (
    DataError,
    DegenerateModelError,
    DigestMismatchError,
    FormatError,
    LoraFuseError,
    PairingError,
    ShapeError,
)
from .export import boundary_steps, export_merged_lora, render_heatmap
from .manifest import canonical_json, read_manifest, write_manifest
from .matrixops import DenseMatrix, abs_sum, decode_to_f32, matmul, topk_abs_sum
from .safetensors_io import LoraLayer, LoraModel, NamingConvention, parse_file, serialize_file
from .selection import (
    GammaFactor,
    LayerImportance,
    ScaleMode,
    ScheduleParams,
    SelectionSchedule,
    build_fixed_schedule,
    build_random_schedule,
    build_schedule,
    build_subset_schedule,
    compute_gamma,
    default_k,
    k_sweep,
    layer_importance,
    magnitude_histogram,
    reconstruct_delta,
    scale_at,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "DegenerateModelError",
    "DenseMatrix",
    "DigestMismatchError",
    "FormatError",
    "GammaFactor",
    "LayerImportance",
    "LoraFuseError",
    "LoraLayer",
    "LoraModel",
    "NamingConvention",
    "PairingError",
    "ScaleMode",
    "ScheduleParams",
    "SelectionSchedule",
    "ShapeError",
    "abs_sum",
    "boundary_steps",
    "build_fixed_schedule",
    "build_random_schedule",
    "build_schedule",
    "build_subset_schedule",
    "canonical_json",
    "compute_gamma",
    "decode_to_f32",
    "default_k",
    "export_merged_lora",
    "k_sweep",
    "layer_importance",
    "magnitude_histogram",
    "matmul",
    "parse_file",
    "read_manifest",
    "reconstruct_delta",
    "render_heatmap",
    "scale_at",
    "serialize_file",
    "topk_abs_sum",
    "write_manifest",
]
