"""Readers for the two artifact kinds the fusion engine emits.

Both are deliberately small. The adapter replays files the scheduler
produced, so validation here is about failing loudly when handed the wrong
file, not about recovering from arbitrary corruption. Tensors are returned
exactly as stored (decoded to float32, shapes untouched) and marked
read-only: this package selects weights, it never edits them.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ManifestError

SUPPORTED_VERSION = "1"

_RLE_TOKEN = re.compile(r"(\d+)([CS])")
_DOWN_SUFFIXES = (".lora_down.weight", ".lora_A.weight")
_UP_SUFFIXES = (".lora_up.weight", ".lora_B.weight")
_ALPHA_SUFFIX = ".alpha"
_DTYPES = {"F32": "<f4", "F16": "<f2"}  # BF16 handled separately


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _decode_row(encoded: str, total_steps: int, path: str) -> str:
    pos = 0
    cells: list[str] = []
    for match in _RLE_TOKEN.finditer(encoded):
        if match.start() != pos:
            raise ManifestError(f"{path}: bad grid row {encoded!r}")
        cells.append(match.group(2) * int(match.group(1)))
        pos = match.end()
    row = "".join(cells)
    if pos != len(encoded) or not row:
        raise ManifestError(f"{path}: bad grid row {encoded!r}")
    if len(row) != total_steps:
        raise ManifestError(
            f"{path}: row {encoded!r} covers {len(row)} steps, manifest says {total_steps}"
        )
    return row


@dataclass(frozen=True)
class FusionPlan:
    """The slice of a manifest the runtime needs: who runs what, when."""

    total_steps: int
    layer_order: tuple[str, ...]
    grid: tuple[str, ...]
    solo: dict[str, str]
    mode: str
    content_digest: str | None
    style_digest: str | None

    def row_for(self, base_module: str) -> str:
        return self.grid[self.layer_order.index(base_module)]


def read_plan(path: str) -> FusionPlan:
    """Load a selection manifest, keeping only the replay-relevant fields."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot read manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")

    version = doc.get("format_version")
    if version != SUPPORTED_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {version!r}")

    try:
        total_steps = int(doc["params"]["total_steps"])
        mode = str(doc["mode"])
        raw_layers = doc["layers"]
        raw_grid = doc["grid"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: manifest is missing required fields: {exc}") from exc
    if total_steps < 1:
        raise ManifestError(f"{path}: nonsensical total_steps {total_steps}")
    if not isinstance(raw_layers, list) or not isinstance(raw_grid, list):
        raise ManifestError(f"{path}: layers and grid must be arrays")
    if len(raw_layers) != len(raw_grid):
        raise ManifestError(
            f"{path}: {len(raw_layers)} layer entries but {len(raw_grid)} grid rows"
        )

    layer_order: list[str] = []
    solo: dict[str, str] = {}
    grid: list[str] = []
    for entry, encoded in zip(raw_layers, raw_grid):
        if not isinstance(entry, dict) or "base_module" not in entry:
            raise ManifestError(f"{path}: layer entries must carry base_module")
        if not isinstance(encoded, str):
            raise ManifestError(f"{path}: grid rows must be strings")
        base = str(entry["base_module"])
        layer_order.append(base)
        grid.append(_decode_row(encoded, total_steps, path))
        if "solo" in entry:
            solo[base] = str(entry["solo"])
    if len(set(layer_order)) != len(layer_order):
        raise ManifestError(f"{path}: duplicate base_module entries")

    def digest_of(key: str) -> str | None:
        source = doc.get(key)
        if source is None:
            return None
        if not isinstance(source, dict) or "sha256" not in source:
            raise ManifestError(f"{path}: malformed {key} block")
        return str(source["sha256"])

    return FusionPlan(
        total_steps=total_steps,
        layer_order=tuple(layer_order),
        grid=tuple(grid),
        solo=solo,
        mode=mode,
        content_digest=digest_of("content_source"),
        style_digest=digest_of("style_source"),
    )


@dataclass
class LoraWeights:
    """One layer's adapter tensors, verbatim from the file."""

    down: np.ndarray
    up: np.ndarray
    alpha: float | None = None


def _decode(dtype: str, raw: bytes, shape: list[int], name: str, path: str) -> np.ndarray:
    if dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        arr = bits.view(np.float32)
    elif dtype in _DTYPES:
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(np.float32)
    else:
        raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype}")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise CheckpointError(f"{path}: tensor {name!r} size does not match its shape")
    arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def read_checkpoint(path: str) -> dict[str, LoraWeights]:
    """Group a checkpoint's tensors by base module.

    Accepts both common naming conventions (lora_down/lora_up and
    lora_A/lora_B) plus per-layer alpha scalars; anything else in the file is
    ignored. Factors are returned in their stored orientation.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    if len(blob) < 8:
        raise CheckpointError(f"{path}: too short for a safetensors container")
    (header_len,) = struct.unpack_from("<Q", blob)
    if 8 + header_len > len(blob):
        raise CheckpointError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header must be a JSON object")

    data = blob[8 + header_len :]
    downs: dict[str, np.ndarray] = {}
    ups: dict[str, np.ndarray] = {}
    alphas: dict[str, float] = {}
    for name, record in header.items():
        if name == "__metadata__":
            continue
        base = None
        slot = None
        for suffix in _DOWN_SUFFIXES:
            if name.endswith(suffix):
                base, slot = name[: -len(suffix)], downs
        for suffix in _UP_SUFFIXES:
            if name.endswith(suffix):
                base, slot = name[: -len(suffix)], ups
        is_alpha = base is None and name.endswith(_ALPHA_SUFFIX)
        if base is None and not is_alpha:
            continue
        try:
            start, end = record["data_offsets"]
            shape = list(record["shape"])
            dtype = str(record["dtype"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed record for {name!r}: {exc}") from exc
        if not 0 <= start <= end <= len(data):
            raise CheckpointError(f"{path}: tensor {name!r} offsets out of range")
        arr = _decode(dtype, data[start:end], shape, name, path)
        if is_alpha:
            if arr.size != 1:
                raise CheckpointError(f"{path}: alpha {name!r} is not a scalar")
            alphas[name[: -len(_ALPHA_SUFFIX)]] = float(arr.reshape(()))
        else:
            slot[base] = arr

    layers: dict[str, LoraWeights] = {}
    for base in downs.keys() | ups.keys():
        if base not in downs or base not in ups:
            raise CheckpointError(f"{path}: layer {base!r} is missing one factor")
        layers[base] = LoraWeights(
            down=downs[base], up=ups[base], alpha=alphas.get(base)
        )
    return layers
