"""Persist schedule results: per-step merged checkpoints and heatmap images.

Exports never blend or modify weights; every written tensor is copied
verbatim from whichever source checkpoint the grid selects for that layer
and step.
"""

from __future__ import annotations

import numpy as np

from .errors import PairingError
from .fileio import atomic_write_bytes, atomic_write_text
from .safetensors_io import FACTOR_NAMES, LoraModel, serialize_file
from .selection import CONTENT, SelectionSchedule

CONTENT_RGB = (0x3B, 0x6F, 0xB5)  # blue
STYLE_RGB = (0x4C, 0xAF, 0x50)  # green


def export_merged_lora(
    content: LoraModel,
    style: LoraModel | None,
    schedule: SelectionSchedule,
    step: int,
    path: str,
) -> None:
    """Write the checkpoint a runtime would apply at one denoising step.

    Tensor names follow the content model's convention. In subset mode only
    the active layers are written (style is unused and may be None).
    """
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    subset = schedule.mode.kind == "subset"
    down_name, up_name = FACTOR_NAMES[content.naming_convention]

    tensors: dict[str, np.ndarray] = {}
    for base, row in zip(schedule.layer_order, schedule.grid):
        pick_content = row[step] == CONTENT
        if subset:
            if not pick_content:
                continue
            source = content
        else:
            source = content if pick_content else style
            if source is None:
                raise PairingError("schedule selects style but no style model was given")
        layer = source.layers.get(base)
        if layer is None:
            raise PairingError(
                f"schedule layer {base!r} is missing from the "
                f"{'content' if source is content else 'style'} checkpoint"
            )
        tensors[f"{base}.{down_name}"] = layer.down.to_2d()
        tensors[f"{base}.{up_name}"] = layer.up.to_2d()
        if layer.alpha is not None:
            tensors[f"{base}.alpha"] = np.asarray(layer.alpha, dtype=np.float32)
    serialize_file(tensors, path)


def boundary_steps(schedule: SelectionSchedule) -> list[int]:
    """Steps whose selection column differs from the previous step's.

    Step 0 always counts; exporting only these steps covers every distinct
    checkpoint the schedule can produce.
    """
    steps = [0]
    for t in range(1, schedule.total_steps):
        if any(row[t] != row[t - 1] for row in schedule.grid):
            steps.append(t)
    return steps


def _cell_colors(schedule: SelectionSchedule) -> np.ndarray:
    """(steps, layers, 3) uint8 color grid; steps run down the vertical axis."""
    n_layers = len(schedule.layer_order)
    colors = np.empty((schedule.total_steps, n_layers, 3), dtype=np.uint8)
    for i, row in enumerate(schedule.grid):
        flags = np.frombuffer(row.encode("ascii"), dtype=np.uint8) == ord(CONTENT)
        colors[:, i, :] = np.where(flags[:, None], CONTENT_RGB, STYLE_RGB)
    return colors


def render_heatmap(schedule: SelectionSchedule, path: str, fmt: str = "svg", cell: int = 4) -> None:
    """Render the grid with steps on the vertical axis and layers across.

    Content cells are blue, style cells green. Output is deterministic:
    identical schedules give identical bytes.
    """
    if fmt == "svg":
        atomic_write_text(str(path), _heatmap_svg(schedule, cell))
    elif fmt == "ppm":
        atomic_write_bytes(str(path), _heatmap_ppm(schedule, cell))
    else:
        raise ValueError(f"unknown heatmap format {fmt!r} (expected 'svg' or 'ppm')")


def _heatmap_ppm(schedule: SelectionSchedule, cell: int) -> bytes:
    colors = _cell_colors(schedule)
    image = colors.repeat(cell, axis=0).repeat(cell, axis=1)
    height, width = image.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + image.tobytes()


def _heatmap_svg(schedule: SelectionSchedule, cell: int) -> str:
    n_layers = len(schedule.layer_order)
    width = n_layers * cell
    height = schedule.total_steps * cell
    content_fill = "#%02X%02X%02X" % CONTENT_RGB
    style_fill = "#%02X%02X%02X" % STYLE_RGB
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n',
    ]
    # one rect per horizontal run of equal cells keeps the file small
    for t in range(schedule.total_steps):
        i = 0
        while i < n_layers:
            j = i
            value = schedule.grid[i][t]
            while j < n_layers and schedule.grid[j][t] == value:
                j += 1
            fill = content_fill if value == CONTENT else style_fill
            parts.append(
                f'<rect x="{i * cell}" y="{t * cell}" '
                f'width="{(j - i) * cell}" height="{cell}" fill="{fill}"/>\n'
            )
            i = j
    parts.append("</svg>\n")
    return "".join(parts)
