"""Shared fixture builders.

Checkpoint bytes are assembled here with struct + json directly, independent
of the package's own serializer, so parser tests are not certifying the code
under test with itself.
"""

from __future__ import annotations

import itertools
import json
import struct

import numpy as np
import pytest

UPDOWN = ("lora_down.weight", "lora_up.weight")
AB = ("lora_A.weight", "lora_B.weight")


def pack_safetensors(entries, metadata=None, header_json=None):
    """Container bytes from (name, dtype, shape, payload) tuples.

    header_json overrides the generated header verbatim (for malformed-header
    cases) while keeping the data region.
    """
    header = {}
    if metadata is not None:
        header["__metadata__"] = metadata
    offset = 0
    blobs = []
    for name, dtype, shape, payload in entries:
        header[name] = {
            "dtype": dtype,
            "shape": list(shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        offset += len(payload)
        blobs.append(payload)
    raw = (json.dumps(header) if header_json is None else header_json).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def f32_entry(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    return (name, "F32", arr.shape, arr.tobytes(order="C"))


def lora_entries(base, down, up, alpha=None, names=UPDOWN):
    down_name, up_name = names
    entries = [
        f32_entry(f"{base}.{down_name}", np.asarray(down, dtype=np.float32)),
        f32_entry(f"{base}.{up_name}", np.asarray(up, dtype=np.float32)),
    ]
    if alpha is not None:
        entries.append(f32_entry(f"{base}.alpha", np.float32(alpha)))
    return entries


def random_factors(rng, rank, out_dim, in_dim, scale=1.0):
    down = (rng.standard_normal((rank, in_dim)) * scale).astype(np.float32)
    up = (rng.standard_normal((out_dim, rank)) * scale).astype(np.float32)
    return down, up


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def write_checkpoint(tmp_path):
    """Writer fixture: entries -> file path (unique name per call)."""
    counter = itertools.count()

    def _write(entries, metadata=None, name=None, header_json=None):
        path = tmp_path / (name or f"ckpt-{next(counter)}.safetensors")
        path.write_bytes(pack_safetensors(entries, metadata, header_json))
        return str(path)

    return _write


@pytest.fixture
def pair_files(write_checkpoint, rng):
    """Deterministic content/style checkpoint pair with mixed ranks.

    Returns (content_path, style_path, bases). Margins between the scores are
    generic (seeded gaussian factors), nowhere near selection boundaries.
    """

    def _build(
        n_layers=5,
        rank_c=4,
        rank_s=8,
        out_dim=24,
        in_dim=20,
        alpha=None,
        content_scale=1.0,
        style_scale=1.0,
        names=UPDOWN,
    ):
        bases = [f"unet.blocks.{i}.attn.to_q" for i in range(n_layers)]
        content_entries = []
        style_entries = []
        for base in bases:
            down, up = random_factors(rng, rank_c, out_dim, in_dim, content_scale)
            content_entries += lora_entries(base, down, up, alpha=alpha, names=names)
            down, up = random_factors(rng, rank_s, out_dim, in_dim, style_scale)
            style_entries += lora_entries(base, down, up, alpha=alpha, names=names)
        return (
            write_checkpoint(content_entries),
            write_checkpoint(style_entries),
            bases,
        )

    return _build
