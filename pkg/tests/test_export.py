"""Per-step checkpoint export and heatmap rendering.

The exporter's contract is "verbatim copy": every written tensor must be
bit-identical to one of the two inputs. Tests compare raw payload bytes.
"""

import numpy as np
import pytest

from lorafuse.errors import PairingError
from lorafuse.export import (
    CONTENT_RGB,
    STYLE_RGB,
    boundary_steps,
    export_merged_lora,
    render_heatmap,
)
from lorafuse.safetensors_io import parse_file
from lorafuse.selection import (
    ScheduleParams,
    SelectionSchedule,
    ScheduleMode,
    build_schedule,
    build_subset_schedule,
)


def fixed_grid_schedule(layer_order, grid, total_steps, kind="topk"):
    return SelectionSchedule(
        layer_order=list(layer_order),
        grid=list(grid),
        params=ScheduleParams(total_steps=total_steps),
        mode=ScheduleMode(kind=kind),
    )


def payload_map(path):
    model = parse_file(path)
    out = {}
    for base, layer in model.layers.items():
        out[base] = (
            layer.down.to_2d().tobytes(),
            layer.up.to_2d().tobytes(),
            layer.alpha,
        )
    return out


@pytest.fixture
def parsed_pair(pair_files):
    content_path, style_path, bases = pair_files(n_layers=3, alpha=4.0)
    return parse_file(content_path), parse_file(style_path), bases


def test_all_content_step_copies_content_bits(parsed_pair, tmp_path):
    content, style, bases = parsed_pair
    schedule = fixed_grid_schedule(bases, ["C" * 4] * 3, 4)
    out = tmp_path / "step.safetensors"
    export_merged_lora(content, style, schedule, 0, str(out))
    exported = payload_map(str(out))
    for base in bases:
        src = content.layers[base]
        assert exported[base][0] == src.down.to_2d().tobytes()
        assert exported[base][1] == src.up.to_2d().tobytes()
        assert exported[base][2] == src.alpha


def test_switching_layer_changes_between_steps(parsed_pair, tmp_path):
    content, style, bases = parsed_pair
    grid = ["C" * 8, "C" * 3 + "S" * 5, "S" * 8]
    schedule = fixed_grid_schedule(bases, grid, 8)
    first = tmp_path / "first.safetensors"
    last = tmp_path / "last.safetensors"
    export_merged_lora(content, style, schedule, 0, str(first))
    export_merged_lora(content, style, schedule, 7, str(last))
    a, b = payload_map(str(first)), payload_map(str(last))
    assert a[bases[0]] == b[bases[0]]  # stays content
    assert a[bases[2]] == b[bases[2]]  # stays style
    assert a[bases[1]] != b[bases[1]]  # switched at step 3
    style_layer = style.layers[bases[1]]
    assert b[bases[1]][0] == style_layer.down.to_2d().tobytes()


def test_every_tensor_comes_from_one_of_the_inputs(parsed_pair, tmp_path):
    content, style, bases = parsed_pair
    schedule = build_schedule(content, style, ScheduleParams(total_steps=6))
    for step in range(6):
        out = tmp_path / f"s{step}.safetensors"
        export_merged_lora(content, style, schedule, step, str(out))
        exported = payload_map(str(out))
        for base, (down, up, alpha) in exported.items():
            candidates = [
                (m.layers[base].down.to_2d().tobytes(), m.layers[base].up.to_2d().tobytes())
                for m in (content, style)
            ]
            assert (down, up) in candidates


def test_solo_pass_layer_present_at_every_step(pair_files, write_checkpoint, rng, tmp_path):
    from conftest import lora_entries, random_factors

    content_path, style_path, bases = pair_files(n_layers=2)
    down, up = random_factors(rng, 2, 8, 6)
    extra = write_checkpoint(lora_entries("only.content", down, up))
    # merge the extra layer into the content model by re-reading both files
    content = parse_file(content_path)
    content.layers.update(parse_file(extra).layers)
    style = parse_file(style_path)
    schedule = build_schedule(content, style, ScheduleParams(total_steps=5))
    for step in range(5):
        out = tmp_path / f"s{step}.safetensors"
        export_merged_lora(content, style, schedule, step, str(out))
        assert "only.content" in payload_map(str(out))


def test_subset_mode_exports_only_active_layers(pair_files, tmp_path):
    content_path, _, bases = pair_files(n_layers=4)
    content = parse_file(content_path)
    schedule = build_subset_schedule(ScheduleParams(total_steps=6), bases, 0.5, seed=11)
    out = tmp_path / "sub.safetensors"
    export_merged_lora(content, None, schedule, 2, str(out))
    exported = payload_map(str(out))
    active = {b for b, row in zip(bases, schedule.grid) if row[2] == "C"}
    assert set(exported) == active
    assert len(active) == 2


def test_missing_style_model_rejected(parsed_pair, tmp_path):
    content, _, bases = parsed_pair
    schedule = fixed_grid_schedule(bases, ["S" * 4] * 3, 4)
    with pytest.raises(PairingError, match="no style model"):
        export_merged_lora(content, None, schedule, 0, str(tmp_path / "x.safetensors"))


def test_unknown_layer_rejected(parsed_pair, tmp_path):
    content, style, _ = parsed_pair
    schedule = fixed_grid_schedule(["ghost"], ["C" * 4], 4)
    with pytest.raises(PairingError, match="missing from the content"):
        export_merged_lora(content, style, schedule, 0, str(tmp_path / "x.safetensors"))


def test_step_out_of_range_rejected(parsed_pair, tmp_path):
    content, style, bases = parsed_pair
    schedule = fixed_grid_schedule(bases, ["C" * 4] * 3, 4)
    with pytest.raises(ValueError):
        export_merged_lora(content, style, schedule, 4, str(tmp_path / "x.safetensors"))


def test_export_is_deterministic(parsed_pair, tmp_path):
    content, style, bases = parsed_pair
    schedule = build_schedule(content, style, ScheduleParams(total_steps=6))
    p1, p2 = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    export_merged_lora(content, style, schedule, 3, str(p1))
    export_merged_lora(content, style, schedule, 3, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


# --- boundary_steps ----------------------------------------------------------


def test_boundary_steps_collects_transitions():
    schedule = fixed_grid_schedule(["a", "b"], ["CCSS", "CCCS"], 4)
    assert boundary_steps(schedule) == [0, 2, 3]


def test_boundary_steps_constant_grid():
    schedule = fixed_grid_schedule(["a"], ["CCCC"], 4)
    assert boundary_steps(schedule) == [0]


# --- heatmaps ----------------------------------------------------------------


def parse_ppm(raw):
    assert raw.startswith(b"P6\n")
    header, pixels = raw.split(b"\n255\n", 1)
    dims = header.split(b"\n")[1].split()
    width, height = int(dims[0]), int(dims[1])
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return img


def test_ppm_geometry_and_uniform_content(tmp_path):
    schedule = fixed_grid_schedule(["a", "b", "c"], ["C" * 5] * 3, 5)
    out = tmp_path / "h.ppm"
    render_heatmap(schedule, str(out), "ppm", cell=4)
    img = parse_ppm(out.read_bytes())
    assert img.shape == (5 * 4, 3 * 4, 3)  # steps vertical, layers horizontal
    assert (img == np.array(CONTENT_RGB, dtype=np.uint8)).all()


def test_ppm_orientation_steps_run_downward(tmp_path):
    # single layer, content then style: top half blue, bottom half green
    schedule = fixed_grid_schedule(["a"], ["CS"], 2)
    out = tmp_path / "h.ppm"
    render_heatmap(schedule, str(out), "ppm", cell=4)
    img = parse_ppm(out.read_bytes())
    assert img.shape == (8, 4, 3)
    assert (img[:4] == np.array(CONTENT_RGB, dtype=np.uint8)).all()
    assert (img[4:] == np.array(STYLE_RGB, dtype=np.uint8)).all()


def test_svg_is_deterministic_and_well_formed(tmp_path):
    schedule = fixed_grid_schedule(["a", "b"], ["CCSS", "SSCC"], 4)
    p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
    render_heatmap(schedule, str(p1), "svg")
    render_heatmap(schedule, str(p2), "svg")
    raw = p1.read_text()
    assert raw == p2.read_text()
    assert raw.startswith('<?xml version="1.0"')
    assert 'version="1.1"' in raw
    assert "#3B6FB5" in raw and "#4CAF50" in raw
    assert raw.rstrip().endswith("</svg>")


def test_svg_merges_horizontal_runs(tmp_path):
    schedule = fixed_grid_schedule(["a", "b", "c"], ["C" * 3] * 3, 3)
    out = tmp_path / "h.svg"
    render_heatmap(schedule, str(out), "svg")
    # one run of three content cells per step -> exactly 3 rects
    assert out.read_text().count("<rect") == 3


def test_unknown_format_rejected(tmp_path):
    schedule = fixed_grid_schedule(["a"], ["CC"], 2)
    with pytest.raises(ValueError, match="unknown heatmap format"):
        render_heatmap(schedule, str(tmp_path / "x.bmp"), "bmp")
