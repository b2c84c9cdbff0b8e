"""Fixtures: a hand-rolled checkpoint packer, a recording module graph, and
manifest builders.

Unit-test manifests are written as plain JSON dicts here, independent of the
scheduler. Integration fixtures go through the installed `lorafuse` CLI
instead, because manifest+checkpoint files are the interface boundary this
package is tested against.
"""

from __future__ import annotations

import contextlib
import io
import json
import re
import struct

import numpy as np
import pytest


def pack_checkpoint(entries):
    """(name, dtype, shape, payload) tuples -> safetensors bytes."""
    header = {}
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
    raw = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def f32(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    return (name, "F32", arr.shape, arr.tobytes(order="C"))


def layer_entries(base, down, up, alpha=None, down_name="lora_down.weight", up_name="lora_up.weight"):
    entries = [f32(f"{base}.{down_name}", down), f32(f"{base}.{up_name}", up)]
    if alpha is not None:
        entries.append(f32(f"{base}.alpha", np.float32(alpha)))
    return entries


def manifest_doc(grid_rows, bases=None, mode="topk", total_steps=None, **extra):
    """Minimal valid manifest dict; grid_rows are run-length encoded strings."""
    bases = bases or [f"block.{i}" for i in range(len(grid_rows))]
    if total_steps is None:
        total_steps = sum(int(m) for m in re.findall(r"(\d+)[CS]", grid_rows[0]))
    doc = {
        "format_version": "1",
        "mode": mode,
        "params": {"total_steps": total_steps},
        "layers": [{"base_module": b} for b in bases],
        "grid": list(grid_rows),
    }
    doc.update(extra)
    return doc


class RecordingModule:
    """Module-graph handle that logs exactly what the session does to it."""

    def __init__(self):
        self.trace = []  # one entry per application: ("content"|"style"|"off", weights)
        self.active = None

    def apply_lora(self, source, down, up, alpha):
        self.active = (source, down, up, alpha)
        self.trace.append(self.active)

    def clear_lora(self):
        self.active = None
        self.trace.append(("off", None, None, None))

    def sources(self):
        return "".join({"content": "C", "style": "S", "off": "-"}[t[0]] for t in self.trace)


@pytest.fixture
def rng():
    return np.random.default_rng(2717)


@pytest.fixture
def write_file(tmp_path):
    counter = iter(range(1000))

    def _write(data, suffix):
        path = tmp_path / f"fixture-{next(counter)}{suffix}"
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(json.dumps(data))
        return str(path)

    return _write


@pytest.fixture
def graph_for():
    def _graph(bases):
        return {base: RecordingModule() for base in bases}

    return _graph


@pytest.fixture
def make_pair(write_file, rng):
    """Write a content/style checkpoint pair sharing layer names."""

    def _make(bases, rank_c=2, rank_s=3, dim=8, alpha=None):
        content, style = [], []
        for base in bases:
            content += layer_entries(
                base,
                rng.standard_normal((rank_c, dim)).astype(np.float32),
                rng.standard_normal((dim, rank_c)).astype(np.float32),
                alpha=alpha,
            )
            style += layer_entries(
                base,
                rng.standard_normal((rank_s, dim)).astype(np.float32),
                rng.standard_normal((dim, rank_s)).astype(np.float32),
                alpha=alpha,
            )
        return (
            write_file(pack_checkpoint(content), ".safetensors"),
            write_file(pack_checkpoint(style), ".safetensors"),
        )

    return _make


@pytest.fixture
def scheduler_cli():
    """The installed scheduler CLI, invoked in-process; skip if absent."""
    cli = pytest.importorskip("lorafuse.cli", reason="scheduler package not installed")

    def _run(*argv):
        with contextlib.redirect_stdout(io.StringIO()):
            rc = cli.main(list(argv))
        assert rc == 0, f"lorafuse {' '.join(argv)} exited {rc}"

    return _run
