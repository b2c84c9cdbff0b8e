"""Read and write LoRA checkpoints in the safetensors container format.

Container layout: bytes 0-7 hold the little-endian u64 length N of the JSON
header, bytes 8..8+N hold the UTF-8 header mapping tensor name -> {dtype,
shape, data_offsets} (plus an optional "__metadata__" string map), and the
remainder is the packed little-endian tensor data.

Two community naming conventions are recognized and normalized to the same
canonical layer keys:

    <base>.lora_down.weight / <base>.lora_up.weight  (+ optional <base>.alpha)
    <base>.lora_A.weight    / <base>.lora_B.weight

Files mixing both conventions are rejected; silent mispairing is worse than
a hard error. Tensors that are not LoRA factors are collected into
``LoraModel.ignored`` instead of failing the parse.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError, PairingError, ShapeError
from .fileio import atomic_write_bytes, sha256_bytes
from .matrixops import DTYPE_WIDTHS, DenseMatrix, decode_to_f32


class NamingConvention(Enum):
    UP_DOWN = "up_down"
    AB = "ab"


# suffix -> (slot, convention); alpha scalars are convention-neutral
_SUFFIXES = (
    (".lora_down.weight", "down", NamingConvention.UP_DOWN),
    (".lora_up.weight", "up", NamingConvention.UP_DOWN),
    (".lora_A.weight", "down", NamingConvention.AB),
    (".lora_B.weight", "up", NamingConvention.AB),
    (".alpha", "alpha", None),
)

FACTOR_NAMES = {
    NamingConvention.UP_DOWN: ("lora_down.weight", "lora_up.weight"),
    NamingConvention.AB: ("lora_A.weight", "lora_B.weight"),
}


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]


@dataclass(frozen=True)
class LoraLayer:
    """One paired low-rank adapter bound to a named base-model weight.

    `down` is the rank x n input factor, `up` the m x rank output factor,
    so the reconstructed update is up @ down (m x n).
    """

    base_module: str
    down: DenseMatrix
    up: DenseMatrix
    rank: int
    alpha: float | None = None

    def __post_init__(self):
        if self.down.rows != self.rank or self.up.cols != self.rank:
            raise ShapeError(
                f"{self.base_module}: rank {self.rank} does not match factors "
                f"down {self.down.shape} / up {self.up.shape}"
            )
        if self.rank > min(self.up.rows, self.down.cols):
            raise ShapeError(
                f"{self.base_module}: rank {self.rank} exceeds "
                f"min(out={self.up.rows}, in={self.down.cols})"
            )
        if self.alpha is not None and not (math.isfinite(self.alpha) and self.alpha > 0):
            raise DataError(f"{self.base_module}: alpha must be a positive finite float")

    @property
    def delta_shape(self) -> tuple[int, int]:
        return (self.up.rows, self.down.cols)


@dataclass
class LoraModel:
    """Ordered collection of paired layers parsed from one checkpoint file."""

    layers: dict[str, LoraLayer]
    source_path: str
    naming_convention: NamingConvention
    sha256: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    ignored: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


def _classify(name: str):
    for suffix, slot, conv in _SUFFIXES:
        if name.endswith(suffix) and len(name) > len(suffix):
            return name[: -len(suffix)], slot, conv
    return None


def _orient_pair(base: str, down: np.ndarray, up: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Resolve factor orientation via the shared rank dimension.

    Canonical storage is down [r, n] / up [m, r]. Some exporters store both
    factors transposed; that reading is accepted only when it yields a
    plausible rank (r <= min(m, n)). For square factors both readings agree
    on validity and the name suffix (canonical reading) wins.
    """
    d0, d1 = down.shape
    u0, u1 = up.shape
    if d0 == u1 and d0 <= min(u0, d1):
        return down, up, d0
    if d1 == u0 and d1 <= min(d0, u1):
        return down.T, up.T, d1
    raise ShapeError(
        f"{base}: factors {d0}x{d1} and {u0}x{u1} do not share a rank dimension"
    )


def _flatten_kernel(name: str, arr: np.ndarray) -> np.ndarray:
    """Conv kernels [o, i, kh, kw] flatten to [o, i*kh*kw]; 2-D passes through."""
    if arr.ndim == 2:
        return arr
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1)
    raise FormatError(f"{name}: expected a 2-D matrix or 4-D conv kernel, got shape {arr.shape}")


def pair_lora_layers(
    records: list[TensorRecord], data: bytes, path: str = ""
) -> tuple[dict[str, LoraLayer], NamingConvention, list[str]]:
    """Pair down/up factor records into LoraLayers.

    Returns layers keyed by canonical base_module in header order, the file's
    naming convention, and the names of ignored (non-LoRA) tensors.
    """
    factors: dict[str, dict[str, TensorRecord]] = {}
    alphas: dict[str, TensorRecord] = {}
    order: list[str] = []
    ignored: list[str] = []
    conventions: set[NamingConvention] = set()

    for rec in records:
        cls = _classify(rec.name)
        if cls is None:
            ignored.append(rec.name)
            continue
        base, slot, conv = cls
        if slot == "alpha":
            alphas[base] = rec
            continue
        conventions.add(conv)
        slots = factors.setdefault(base, {})
        if base not in order:
            order.append(base)
        if slot in slots:
            raise PairingError(f"{path or '<file>'}: two candidates for {base!r} {slot} factor")
        slots[slot] = rec

    if len(conventions) > 1:
        raise FormatError(
            f"{path or '<file>'}: mixed naming conventions (lora_down/up and lora_A/B)"
        )
    convention = conventions.pop() if conventions else NamingConvention.UP_DOWN

    def tensor(rec: TensorRecord) -> np.ndarray:
        begin, end = rec.data_offsets
        count = int(np.prod(rec.shape, dtype=np.int64)) if rec.shape else 1
        flat = decode_to_f32(data[begin:end], rec.dtype, count, rec.name)
        return flat.reshape(rec.shape)

    layers: dict[str, LoraLayer] = {}
    for base in order:
        slots = factors[base]
        if "down" not in slots or "up" not in slots:
            have = next(iter(slots.values()))
            raise PairingError(f"orphan factor {have.name!r}: no matching pair tensor")
        down = _flatten_kernel(slots["down"].name, tensor(slots["down"]))
        up = _flatten_kernel(slots["up"].name, tensor(slots["up"]))
        down, up, rank = _orient_pair(base, down, up)

        alpha = None
        if base in alphas:
            rec = alphas.pop(base)
            vals = tensor(rec).reshape(-1)
            if vals.size != 1:
                raise FormatError(f"{rec.name}: alpha must be a scalar, got shape {rec.shape}")
            alpha = float(vals[0])

        layers[base] = LoraLayer(
            base_module=base,
            down=DenseMatrix.from_2d(down),
            up=DenseMatrix.from_2d(up),
            rank=rank,
            alpha=alpha,
        )

    # alpha scalars without a factor pair are inert metadata, not a data loss
    ignored.extend(alphas[b].name for b in alphas)
    return layers, convention, ignored


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"duplicate tensor name {key!r} in header")
        out[key] = value
    return out


def _parse_header(raw: bytes, path: str) -> tuple[dict, bytes]:
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for a header length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(
            raw[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=_reject_duplicate_keys
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    return header, raw[8 + header_len :]


def _records_from_header(header: dict, data_len: int, path: str) -> list[TensorRecord]:
    records = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
            raise FormatError(f"{path}: tensor entry {name!r} missing dtype/shape/data_offsets")
        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 1 for d in shape):
            raise FormatError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) for o in offsets)
        ):
            raise FormatError(f"{path}: tensor {name!r} has invalid data_offsets {offsets!r}")
        begin, end = offsets
        if not (0 <= begin <= end <= data_len):
            raise FormatError(f"{path}: tensor {name!r} offsets [{begin}, {end}) outside data region")
        width = DTYPE_WIDTHS.get(entry["dtype"])
        if width is None:
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != width * count:
            raise FormatError(
                f"{path}: tensor {name!r} spans {end - begin} bytes, "
                f"expected {width * count} for dtype {entry['dtype']} shape {shape}"
            )
        records.append(TensorRecord(name, entry["dtype"], tuple(shape), (begin, end)))

    by_begin = sorted(records, key=lambda r: r.data_offsets)
    for prev, cur in zip(by_begin, by_begin[1:]):
        if cur.data_offsets[0] < prev.data_offsets[1]:
            raise FormatError(
                f"{path}: tensors {prev.name!r} and {cur.name!r} have overlapping data"
            )
    return records


def parse_file(path: str) -> LoraModel:
    """Parse one safetensors checkpoint into paired, f32-decoded layers."""
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = sha256_bytes(raw)
    header, data = _parse_header(raw, path)

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: __metadata__ must map strings to strings")

    records = _records_from_header(header, len(data), path)
    layers, convention, ignored = pair_lora_layers(records, data, path)
    return LoraModel(
        layers=layers,
        source_path=str(path),
        naming_convention=convention,
        sha256=digest,
        metadata=dict(metadata),
        ignored=ignored,
    )


def serialize_file(
    obj: "LoraModel | Mapping[str, np.ndarray]",
    path: str,
    metadata: dict[str, str] | None = None,
) -> None:
    """Write a LoraModel or a prepared name->array mapping as safetensors.

    All payloads are stored as F32, so parse -> serialize -> parse reproduces
    names, shapes, and payload bytes exactly.
    """
    if isinstance(obj, LoraModel):
        down_name, up_name = FACTOR_NAMES[obj.naming_convention]
        tensors: dict[str, np.ndarray] = {}
        for base, layer in obj.layers.items():
            tensors[f"{base}.{down_name}"] = layer.down.to_2d()
            tensors[f"{base}.{up_name}"] = layer.up.to_2d()
            if layer.alpha is not None:
                tensors[f"{base}.alpha"] = np.asarray(layer.alpha, dtype=np.float32)
        if metadata is None and obj.metadata:
            metadata = obj.metadata
    else:
        tensors = {name: np.asarray(arr) for name, arr in obj.items()}

    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}

    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise DataError(f"refusing to serialize non-finite tensor {name!r}")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    pad = (8 - len(header_bytes) % 8) % 8  # align the data region, as common writers do
    header_bytes += b" " * pad
    payload = struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)
    atomic_write_bytes(str(path), payload)
