"""Session lifecycle: binding, digest checks, per-step application."""

import numpy as np
import pytest

from lorafuse_adapter import (
    BindingError,
    CheckpointError,
    DigestMismatchError,
    StateError,
    load_session,
    sha256_file,
)

from conftest import manifest_doc


def with_digests(doc, content_path, style_path=None):
    doc["content_source"] = {"path": content_path, "sha256": sha256_file(content_path)}
    if style_path is not None:
        doc["style_source"] = {"path": style_path, "sha256": sha256_file(style_path)}
    return doc


@pytest.fixture
def loaded(make_pair, write_file, graph_for):
    """Session over a 2C3S/5C manifest with digests, plus its graph."""
    bases = ["unet.a", "unet.b"]
    content, style = make_pair(bases)
    doc = with_digests(manifest_doc(["2C3S", "5C"], bases=bases), content, style)
    manifest = write_file(doc, ".json")
    graph = graph_for(bases)
    session = load_session(manifest, content, style, module_graph=graph)
    return session, graph, bases


def test_load_starts_at_step_zero(loaded):
    session, _, bases = loaded
    assert session.step_counter == 0
    assert list(session.bindings) == bases
    assert session.unresolved == ()
    assert not session.finished


def test_on_step_applies_verbatim_tensors(loaded):
    session, graph, bases = loaded
    session.on_step()
    source, down, up, alpha = graph["unet.a"].active
    assert source == "content"
    assert down is session.content_weights["unet.a"].down  # same object, no copy
    assert up is session.content_weights["unet.a"].up
    assert alpha is None
    assert session.step_counter == 1


def test_trace_follows_grid_with_switch_boundary(loaded):
    session, graph, _ = loaded
    for _ in range(5):
        session.on_step()
    assert graph["unet.a"].sources() == "CCSSS"
    assert graph["unet.b"].sources() == "CCCCC"
    assert session.finished


def test_style_tensors_untouched_on_all_content_rows(loaded):
    session, graph, _ = loaded
    for _ in range(5):
        session.on_step()
    style_arrays = {
        id(w.down) for w in session.style_weights.values()
    } | {id(w.up) for w in session.style_weights.values()}
    applied_b = {id(t) for entry in graph["unet.b"].trace for t in entry[1:3]}
    assert style_arrays.isdisjoint(applied_b)


def test_stepping_past_the_end_raises(loaded):
    session, _, _ = loaded
    for _ in range(5):
        session.on_step()
    with pytest.raises(StateError, match="ends after 5 steps"):
        session.on_step()


def test_two_sessions_produce_identical_traces(make_pair, write_file, graph_for):
    bases = ["x.q", "x.k", "x.v"]
    content, style = make_pair(bases)
    manifest = write_file(manifest_doc(["1C4S", "3C2S", "5S"], bases=bases), ".json")
    traces = []
    for _ in range(2):
        graph = graph_for(bases)
        session = load_session(manifest, content, style, module_graph=graph)
        while not session.finished:
            session.on_step()
        traces.append({b: graph[b].sources() for b in bases})
    assert traces[0] == traces[1]


def test_digest_mismatch_aborts(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, style = make_pair(bases)
    other_content, other_style = make_pair(bases)
    doc = with_digests(manifest_doc(["2C2S"], bases=bases), content, style)
    manifest = write_file(doc, ".json")
    with pytest.raises(DigestMismatchError, match="style checkpoint"):
        load_session(manifest, content, other_style, module_graph=graph_for(bases))
    with pytest.raises(DigestMismatchError, match="content checkpoint"):
        load_session(manifest, other_content, style, module_graph=graph_for(bases))
    # explicit opt-out still loads
    session = load_session(
        manifest, other_content, other_style, module_graph=graph_for(bases),
        verify_digests=False,
    )
    assert session.step_counter == 0


def test_manifest_without_digests_skips_verification(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, style = make_pair(bases)
    manifest = write_file(manifest_doc(["1C1S"], bases=bases), ".json")
    session = load_session(manifest, content, style, module_graph=graph_for(bases))
    assert session.plan.content_digest is None


def test_unresolved_layer_strict_vs_lenient(make_pair, write_file, graph_for):
    bases = ["unet.a", "unet.gone"]
    content, style = make_pair(bases)
    manifest = write_file(manifest_doc(["2C", "2S"], bases=bases), ".json")
    graph = graph_for(["unet.a"])  # second layer missing from the runtime

    with pytest.raises(BindingError, match="unet.gone"):
        load_session(manifest, content, style, module_graph=graph, strict=True)

    session = load_session(manifest, content, style, module_graph=graph)
    assert session.unresolved == ("unet.gone",)
    session.on_step()  # skipped layer must not break stepping
    assert graph["unet.a"].sources() == "C"


def test_missing_style_checkpoint_rejected(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, _ = make_pair(bases)
    manifest = write_file(manifest_doc(["1C2S"], bases=bases), ".json")
    with pytest.raises(CheckpointError, match="no style checkpoint"):
        load_session(manifest, content, None, module_graph=graph_for(bases))


def test_all_content_manifest_needs_no_style(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, _ = make_pair(bases)
    manifest = write_file(manifest_doc(["3C"], bases=bases), ".json")
    graph = graph_for(bases)
    session = load_session(manifest, content, None, module_graph=graph)
    for _ in range(3):
        session.on_step()
    assert graph["unet.a"].sources() == "CCC"


def test_layer_missing_from_checkpoint_rejected(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, style = make_pair(bases)
    manifest = write_file(
        manifest_doc(["2C", "2S"], bases=["unet.a", "unet.ghost"]), ".json"
    )
    with pytest.raises(CheckpointError, match="unet.ghost"):
        load_session(
            manifest, content, style, module_graph=graph_for(["unet.a", "unet.ghost"])
        )


def test_subset_manifest_toggles_layers_off(make_pair, write_file, graph_for):
    bases = ["unet.a", "unet.b"]
    content, _ = make_pair(bases)
    manifest = write_file(
        manifest_doc(["2C2S", "2S2C"], bases=bases, mode="subset"), ".json"
    )
    graph = graph_for(bases)
    session = load_session(manifest, content, None, module_graph=graph)
    assert session.style_weights is None
    for _ in range(4):
        session.on_step()
    assert graph["unet.a"].sources() == "CC--"
    assert graph["unet.b"].sources() == "--CC"


def test_subset_manifest_ignores_style_file(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, style = make_pair(bases)
    manifest = write_file(manifest_doc(["1C1S"], bases=bases, mode="subset"), ".json")
    graph = graph_for(bases)
    session = load_session(manifest, content, style, module_graph=graph)
    assert session.style_weights is None
    session.on_step()
    session.on_step()
    assert graph["unet.a"].sources() == "C-"


def test_weights_never_mutated(make_pair, write_file, graph_for, tmp_path):
    bases = ["unet.a"]
    content, style = make_pair(bases)
    before = (open(content, "rb").read(), open(style, "rb").read())
    manifest = write_file(manifest_doc(["2C2S"], bases=bases), ".json")
    graph = graph_for(bases)
    session = load_session(manifest, content, style, module_graph=graph)
    while not session.finished:
        session.on_step()
    applied = graph["unet.a"].trace[0][1]
    with pytest.raises(ValueError):
        applied[0, 0] = 123.0  # handles get read-only views
    assert (open(content, "rb").read(), open(style, "rb").read()) == before


def test_callback_shim_advances_and_passes_kwargs(loaded):
    session, graph, _ = loaded
    callback = session.as_callback()
    out = callback(object(), 0, 981, {"latents": "x"})
    assert out == {"latents": "x"}
    assert session.step_counter == 1
    assert callback() == {}
    assert session.step_counter == 2


def test_alpha_scalar_passed_through(make_pair, write_file, graph_for):
    bases = ["unet.a"]
    content, style = make_pair(bases, alpha=4.0)
    manifest = write_file(manifest_doc(["1C1S"], bases=bases), ".json")
    graph = graph_for(bases)
    session = load_session(manifest, content, style, module_graph=graph)
    session.on_step()
    assert graph["unet.a"].active[0] == "content"
    assert graph["unet.a"].active[3] == 4.0
    session.on_step()
    assert graph["unet.a"].active[0] == "style"
    assert graph["unet.a"].active[3] == 4.0
