"""Portable JSON record of a selection schedule.

The manifest is the contract between the scheduler, the checkpoint exporter,
and runtime adapters: parameters, per-layer scores, gamma, source digests,
and the full grid (run-length encoded per row, e.g. "17C33S"). Serialization
is canonical -- sorted keys, fixed float formatting with 17 significant
digits, null fields omitted -- so identical schedules produce byte-identical
files.
"""

from __future__ import annotations

import json
import math
import re

from .errors import FormatError
from .fileio import atomic_write_text
from .selection import (
    CONTENT,
    STYLE,
    GammaFactor,
    LayerImportance,
    ScaleMode,
    ScheduleMode,
    ScheduleParams,
    SelectionSchedule,
    SourceRef,
)

FORMAT_VERSION = "1"

_RLE_TOKEN = re.compile(r"(\d+)([CS])")


def rle_encode(row: str) -> str:
    """Run-length encode a C/S row: 'CCCSS' -> '3C2S'."""
    out = []
    i = 0
    while i < len(row):
        j = i
        while j < len(row) and row[j] == row[i]:
            j += 1
        out.append(f"{j - i}{row[i]}")
        i = j
    return "".join(out)


def rle_decode(encoded: str, total_steps: int) -> str:
    """Inverse of rle_encode; validates alphabet and total length."""
    pos = 0
    parts = []
    length = 0
    for match in _RLE_TOKEN.finditer(encoded):
        if match.start() != pos:
            raise FormatError(f"invalid run-length row {encoded!r}")
        count = int(match.group(1))
        if count < 1:
            raise FormatError(f"invalid run length in {encoded!r}")
        parts.append(match.group(2) * count)
        length += count
        pos = match.end()
    if pos != len(encoded) or not parts:
        raise FormatError(f"invalid run-length row {encoded!r}")
    if length != total_steps:
        raise FormatError(f"row {encoded!r} decodes to {length} cells, expected {total_steps}")
    return "".join(parts)


def switch_step_of(row: str) -> "int | str | None":
    """Switch point of a content-prefix/style-suffix row.

    Returns "never" for an all-content row, "always_style" for an all-style
    row, the first style step for a clean single switch, and None when the
    row is not monotone (random/modular schedules).
    """
    first_style = row.find(STYLE)
    if first_style == -1:
        return "never"
    if row.find(CONTENT, first_style) != -1:
        return None
    return "always_style" if first_style == 0 else first_style


def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise FormatError(f"cannot serialize non-finite float {value!r}")
    return "%.17g" % value


def canonical_json(value, indent: int = 0) -> str:
    """Deterministic JSON: sorted keys, %.17g floats, 2-space indent."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _format_float(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=True)
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{inner}{canonical_json(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f"{inner}{json.dumps(str(k), ensure_ascii=True)}: {canonical_json(v, indent + 1)}"
            for k, v in sorted(value.items())
        ]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _drop_nones(mapping: dict) -> dict:
    return {k: v for k, v in mapping.items() if v is not None}


def manifest_dict(schedule: SelectionSchedule) -> dict:
    """Manifest document for a schedule (plain dict, ready for canonical_json)."""
    imp_by_base = {imp.base_module: imp for imp in schedule.importances}
    layers = []
    for base, row in zip(schedule.layer_order, schedule.grid):
        entry: dict = {"base_module": base}
        imp = imp_by_base.get(base)
        if imp is not None:
            entry.update(
                s_content=imp.s_content,
                s_style=imp.s_style,
                k_used=imp.k_used,
                rank_content=imp.rank_content,
                rank_style=imp.rank_style,
            )
        if base in schedule.solo:
            entry["solo"] = schedule.solo[base]
        switch = switch_step_of(row)
        if switch is not None:
            entry["switch_step"] = switch
        layers.append(entry)

    mode = schedule.mode
    mode_args = _drop_nones(
        {
            "seed": mode.seed,
            "p_content": mode.p_content,
            "fraction": mode.fraction,
            "literal_fixed_rule": mode.literal_fixed_rule or None,
        }
    )
    params = schedule.params
    doc = {
        "format_version": FORMAT_VERSION,
        "mode": mode.kind,
        "solo_policy": schedule.solo_policy,
        "params": _drop_nones(
            {
                "total_steps": params.total_steps,
                "alpha": params.alpha,
                "beta": params.beta,
                "scale_mode": params.scale_mode.value,
                "alpha_prime": params.alpha_prime,
                "beta_prime": params.beta_prime,
                "k_override": params.k_override,
                "apply_lora_alpha": params.apply_lora_alpha,
            }
        ),
        "layers": layers,
        "grid": [rle_encode(row) for row in schedule.grid],
    }
    if mode_args:
        doc["mode_args"] = mode_args
    if schedule.gamma is not None:
        doc["gamma"] = {
            "value": schedule.gamma.value,
            "content_total": schedule.gamma.content_total,
            "style_total": schedule.gamma.style_total,
        }
    if schedule.content_source is not None:
        doc["content_source"] = {
            "path": schedule.content_source.path,
            "sha256": schedule.content_source.sha256,
        }
    if schedule.style_source is not None:
        doc["style_source"] = {
            "path": schedule.style_source.path,
            "sha256": schedule.style_source.sha256,
        }
    return doc


def write_manifest(schedule: SelectionSchedule, path: str) -> None:
    atomic_write_text(str(path), canonical_json(manifest_dict(schedule)) + "\n")


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise FormatError(f"{path}: manifest is missing {key!r}")
    return doc[key]


def _source_from(entry: dict | None) -> SourceRef | None:
    if entry is None:
        return None
    return SourceRef(path=str(entry["path"]), sha256=str(entry["sha256"]))


def read_manifest(path: str) -> SelectionSchedule:
    """Parse and validate a manifest back into a SelectionSchedule."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")

    version = _require(doc, "format_version", path)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {version!r}")

    raw_params = _require(doc, "params", path)
    try:
        params = ScheduleParams(
            total_steps=int(raw_params["total_steps"]),
            alpha=float(raw_params["alpha"]),
            beta=float(raw_params["beta"]),
            scale_mode=ScaleMode(raw_params["scale_mode"]),
            alpha_prime=float(raw_params["alpha_prime"]),
            beta_prime=float(raw_params["beta_prime"]),
            k_override=(
                int(raw_params["k_override"]) if raw_params.get("k_override") is not None else None
            ),
            apply_lora_alpha=bool(raw_params["apply_lora_alpha"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid params block: {exc}") from exc

    mode_args = doc.get("mode_args", {})
    mode = ScheduleMode(
        kind=str(_require(doc, "mode", path)),
        seed=int(mode_args["seed"]) if "seed" in mode_args else None,
        p_content=float(mode_args["p_content"]) if "p_content" in mode_args else None,
        fraction=float(mode_args["fraction"]) if "fraction" in mode_args else None,
        literal_fixed_rule=bool(mode_args.get("literal_fixed_rule", False)),
    )

    raw_layers = _require(doc, "layers", path)
    raw_grid = _require(doc, "grid", path)
    if not isinstance(raw_layers, list) or not isinstance(raw_grid, list):
        raise FormatError(f"{path}: layers and grid must be arrays")
    if len(raw_layers) != len(raw_grid):
        raise FormatError(
            f"{path}: {len(raw_layers)} layer entries but {len(raw_grid)} grid rows"
        )

    layer_order: list[str] = []
    grid: list[str] = []
    importances: list[LayerImportance] = []
    solo: dict[str, str] = {}
    for entry, encoded in zip(raw_layers, raw_grid):
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: layer entries must be objects")
        base = str(_require(entry, "base_module", path))
        if not isinstance(encoded, str):
            raise FormatError(f"{path}: grid rows must be strings")
        row = rle_decode(encoded, params.total_steps)
        declared = entry.get("switch_step")
        if declared is not None and declared != switch_step_of(row):
            raise FormatError(
                f"{path}: layer {base!r} declares switch_step {declared!r} "
                f"inconsistent with its grid row"
            )
        layer_order.append(base)
        grid.append(row)
        if "s_content" in entry:
            importances.append(
                LayerImportance(
                    base_module=base,
                    s_content=float(entry["s_content"]),
                    s_style=float(entry["s_style"]),
                    k_used=int(entry["k_used"]),
                    rank_content=int(entry["rank_content"]),
                    rank_style=int(entry["rank_style"]),
                )
            )
        if "solo" in entry:
            solo[base] = str(entry["solo"])

    try:
        gamma = None
        if "gamma" in doc:
            gamma = GammaFactor(
                value=float(doc["gamma"]["value"]),
                content_total=float(doc["gamma"]["content_total"]),
                style_total=float(doc["gamma"]["style_total"]),
            )
        content_source = _source_from(doc.get("content_source"))
        style_source = _source_from(doc.get("style_source"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid gamma or source block: {exc}") from exc

    return SelectionSchedule(
        layer_order=layer_order,
        grid=grid,
        params=params,
        mode=mode,
        gamma=gamma,
        importances=importances,
        solo=solo,
        solo_policy=str(doc.get("solo_policy", "solo-pass")),
        content_source=content_source,
        style_source=style_source,
    )
