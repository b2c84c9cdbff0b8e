"""Per-step replay of a fusion plan against a live module graph.

The runtime hands load_session a mapping from base-module names to handle
objects; a handle is anything with

    apply_lora(source, down, up, alpha)   source is "content" or "style"
    clear_lora()

The session walks the manifest grid one denoising step per on_step call and
tells each bound handle which adapter is active. Weight arrays are passed
through verbatim (same objects the checkpoint reader produced, read-only);
the session does no arithmetic of its own. It also counts steps itself
rather than trusting pipeline-reported timestep values, which keeps the
step axis aligned with the scheduler's completed-fraction convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import BindingError, CheckpointError, DigestMismatchError, StateError
from .formats import FusionPlan, LoraWeights, read_checkpoint, read_plan, sha256_file

CONTENT = "C"
SUBSET_MODE = "subset"


@dataclass
class AdapterSession:
    """One generation's worth of per-step adapter switching.

    Not shareable across concurrent generations: the step counter is the
    only clock, so interleaved on_step calls from two samplers would shear
    the schedule.
    """

    plan: FusionPlan
    content_weights: dict[str, LoraWeights]
    style_weights: dict[str, LoraWeights] | None
    bindings: dict[str, Any]
    unresolved: tuple[str, ...] = ()
    step_counter: int = 0
    _rows: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._rows = dict(zip(self.plan.layer_order, self.plan.grid))

    def on_step(self) -> None:
        """Apply every bound layer's selection for the current step, then advance."""
        step = self.step_counter
        if step >= self.plan.total_steps:
            raise StateError(
                f"on_step called at step {step}; the schedule ends after "
                f"{self.plan.total_steps} steps"
            )
        for base, handle in self.bindings.items():
            if self._rows[base][step] == CONTENT:
                weights = self.content_weights[base]
                handle.apply_lora("content", weights.down, weights.up, weights.alpha)
            elif self.style_weights is None:
                handle.clear_lora()
            else:
                weights = self.style_weights[base]
                handle.apply_lora("style", weights.down, weights.up, weights.alpha)
        self.step_counter = step + 1

    @property
    def finished(self) -> bool:
        return self.step_counter >= self.plan.total_steps

    def as_callback(self):
        """Adapter hook shaped like a diffusers per-step-end callback.

        Positional pipeline/step/timestep arguments are accepted and ignored
        (the session keeps its own count); callback kwargs pass through.
        """

        def _callback(pipeline=None, step=None, timestep=None, callback_kwargs=None):
            self.on_step()
            return {} if callback_kwargs is None else callback_kwargs

        return _callback


def _verify(kind: str, path: str, expected: str | None) -> None:
    if expected is None:
        return
    actual = sha256_file(path)
    if actual != expected:
        raise DigestMismatchError(
            f"{kind} checkpoint {path} has SHA-256 {actual}, manifest recorded {expected}"
        )


def load_session(
    manifest_path: str,
    content_path: str,
    style_path: str | None = None,
    module_graph: Mapping[str, Any] | None = None,
    strict: bool = False,
    verify_digests: bool = True,
) -> AdapterSession:
    """Read the manifest and checkpoints, bind layers, refuse bad inputs.

    Subset-mode manifests are single-adapter analysis masks: style cells mean
    "adapter off", so style_path is ignored for them. For every other mode a
    style checkpoint is required as soon as any grid cell selects style.
    Unresolved layer names raise under strict=True and are skipped (but
    reported on the session) otherwise.
    """
    plan = read_plan(manifest_path)
    module_graph = module_graph or {}

    subset = plan.mode == SUBSET_MODE
    style_needed = not subset and any("S" in row for row in plan.grid)
    if style_needed and style_path is None:
        raise CheckpointError(
            f"{manifest_path} selects style layers but no style checkpoint was given"
        )

    if verify_digests:
        _verify("content", content_path, plan.content_digest)
        if not subset and style_path is not None:
            _verify("style", style_path, plan.style_digest)

    content_weights = read_checkpoint(content_path)
    style_weights = None
    if not subset and style_path is not None:
        style_weights = read_checkpoint(style_path)

    bindings: dict[str, Any] = {}
    unresolved: list[str] = []
    for base, row in zip(plan.layer_order, plan.grid):
        handle = module_graph.get(base)
        if handle is None:
            if strict:
                raise BindingError(f"manifest layer {base!r} is not in the module graph")
            unresolved.append(base)
            continue
        if "C" in row and base not in content_weights:
            raise CheckpointError(f"{content_path} has no tensors for layer {base!r}")
        if "S" in row and style_weights is not None and base not in style_weights:
            raise CheckpointError(f"{style_path} has no tensors for layer {base!r}")
        bindings[base] = handle

    return AdapterSession(
        plan=plan,
        content_weights=content_weights,
        style_weights=style_weights,
        bindings=bindings,
        unresolved=tuple(unresolved),
    )
