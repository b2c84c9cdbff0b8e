"""Content/style layer selection over the denoising schedule.

For each paired layer the importance of either adapter is the sum of the K
largest absolute values of its reconstructed weight update (K defaults to
rank_content * rank_style). A global balance factor gamma (total absolute
content mass over total absolute style mass) makes the comparison robust to
differently scaled community checkpoints, and a timestep-dependent scale
shifts the balance from content-favored early in denoising to style-favored
late. The result is a (layer x step) grid of choices.

Steps are parameterized by the completed fraction x = step/(total_steps-1),
increasing over denoising, so the linear style multiplier grows from beta to
alpha+beta.
"""

from __future__ import annotations

import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DegenerateModelError, PairingError
from .matrixops import DenseMatrix, abs_sum, matmul, topk_abs_sum
from .safetensors_io import LoraLayer, LoraModel

CONTENT = "C"
STYLE = "S"

SOLO_PASS = "solo-pass"
SOLO_DROP = "drop"


class ScaleMode(Enum):
    LINEAR = "linear"
    MODULAR = "modular"
    NONE = "none"


class Choice(Enum):
    CONTENT = CONTENT
    STYLE = STYLE


@dataclass(frozen=True)
class ScheduleParams:
    """Knobs of the selection schedule; defaults follow the reference setting."""

    total_steps: int = 50
    alpha: float = 1.5
    beta: float = 0.5
    scale_mode: ScaleMode = ScaleMode.LINEAR
    alpha_prime: float = 1.5
    beta_prime: float = 1.3
    k_override: int | None = None
    apply_lora_alpha: bool = True

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError(f"total_steps must be >= 2, got {self.total_steps}")
        if self.scale_mode is ScaleMode.LINEAR and not self.alpha + self.beta > 0:
            raise ValueError("linear scale needs alpha + beta > 0")
        if self.scale_mode is ScaleMode.MODULAR and not self.alpha > 0:
            raise ValueError("modular scale needs alpha > 0 (it is the modulus)")
        if self.k_override is not None and self.k_override < 1:
            raise ValueError(f"k_override must be >= 1, got {self.k_override}")


@dataclass(frozen=True)
class GammaFactor:
    """Content-to-style balance ratio of total absolute weight mass."""

    value: float
    content_total: float
    style_total: float


@dataclass(frozen=True)
class LayerImportance:
    base_module: str
    s_content: float
    s_style: float
    k_used: int
    rank_content: int
    rank_style: int


@dataclass(frozen=True)
class SourceRef:
    path: str
    sha256: str


@dataclass(frozen=True)
class ScheduleMode:
    """Which builder produced a schedule, plus its mode-specific arguments."""

    kind: str  # topk | topk_noscale | fixed | random | subset
    seed: int | None = None
    p_content: float | None = None
    fraction: float | None = None
    literal_fixed_rule: bool = False


@dataclass
class SelectionSchedule:
    """(layer x step) grid of choices plus everything that produced it.

    Each grid row is a string over {"C", "S"} of length params.total_steps.
    In subset mode "C" marks an active layer and "S" an inactive one.
    """

    layer_order: list[str]
    grid: list[str]
    params: ScheduleParams
    mode: ScheduleMode
    gamma: GammaFactor | None = None
    importances: list[LayerImportance] = field(default_factory=list)
    solo: dict[str, str] = field(default_factory=dict)  # base_module -> "content"|"style"
    solo_policy: str = SOLO_PASS
    content_source: SourceRef | None = None
    style_source: SourceRef | None = None

    def __post_init__(self):
        if len(self.grid) != len(self.layer_order):
            raise ValueError("grid row count does not match layer_order")
        for row in self.grid:
            if len(row) != self.params.total_steps or set(row) - {CONTENT, STYLE}:
                raise ValueError("grid rows must be C/S strings of length total_steps")

    @property
    def total_steps(self) -> int:
        return self.params.total_steps


def worker_count(explicit: int | None = None) -> int:
    """Worker cap: explicit argument, else KLORA_THREADS, else the CPU count."""
    if explicit is not None:
        return max(1, explicit)
    env = os.environ.get("KLORA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def reconstruct_delta(layer: LoraLayer, apply_lora_alpha: bool = True) -> DenseMatrix:
    """Weight update up @ down, optionally scaled by alpha/rank.

    The product and the alpha/rank scaling accumulate in float64 and round
    to float32 once on store.
    """
    prod = layer.up.to_2d().astype(np.float64) @ layer.down.to_2d().astype(np.float64)
    if apply_lora_alpha and layer.alpha is not None:
        prod = prod * (layer.alpha / layer.rank)
    return DenseMatrix.from_2d(prod.astype(np.float32))


def default_k(rank_content: int, rank_style: int, elements: int) -> int:
    """K = r_c * r_s, clamped to the element count of the update matrix."""
    return min(rank_content * rank_style, elements)


def _check_same_target(content: LoraLayer, style: LoraLayer) -> None:
    if content.delta_shape != style.delta_shape:
        raise PairingError(
            f"{content.base_module}: content update is {content.delta_shape} "
            f"but style update is {style.delta_shape}"
        )


def layer_importance(
    content: LoraLayer, style: LoraLayer, params: ScheduleParams
) -> LayerImportance:
    """Top-K absolute sums of both reconstructed updates for one layer."""
    return _score_layer(content, style, params).importance


def matched_layers(content: LoraModel, style: LoraModel) -> list[str]:
    """Base modules present in both checkpoints, in content-file order."""
    return [base for base in content.layers if base in style.layers]


def compute_gamma(
    content: LoraModel,
    style: LoraModel,
    matched: list[str],
    apply_lora_alpha: bool = True,
) -> GammaFactor:
    """Ratio of absolute-mass totals over the matched layers.

    Per-layer sums accumulate layer by layer in list order, so the result is
    independent of how per-layer work was scheduled.
    """
    if not matched:
        raise PairingError("gamma needs at least one matched layer")
    content_total = 0.0
    style_total = 0.0
    for base in matched:
        content_total += abs_sum(reconstruct_delta(content.layers[base], apply_lora_alpha))
        style_total += abs_sum(reconstruct_delta(style.layers[base], apply_lora_alpha))
    return _gamma_from_totals(content_total, style_total)


def _gamma_from_totals(content_total: float, style_total: float) -> GammaFactor:
    if style_total == 0.0 or content_total == 0.0:
        raise DegenerateModelError(
            "cannot balance checkpoints with zero total weight mass "
            f"(content={content_total}, style={style_total})"
        )
    return GammaFactor(content_total / style_total, content_total, style_total)


def scale_at(step_index: int, params: ScheduleParams) -> float:
    """Style-score multiplier at one denoising step.

    x is the completed fraction of denoising: 0 at the first step, 1 at the
    last. Linear mode returns alpha*x + beta; modular mode folds the same
    ramp back into (0, alpha] via fmod (an exact 0 maps to alpha so style is
    never unselectable); none mode always returns 1.
    """
    if not 0 <= step_index < params.total_steps:
        raise ValueError(f"step {step_index} outside [0, {params.total_steps})")
    x = step_index / (params.total_steps - 1)
    if params.scale_mode is ScaleMode.LINEAR:
        return params.alpha * x + params.beta
    if params.scale_mode is ScaleMode.MODULAR:
        value = math.fmod(params.alpha_prime * x + params.beta_prime, params.alpha)
        return params.alpha if value == 0.0 else value
    return 1.0


def effective_style_score(imp: LayerImportance, gamma: GammaFactor, scale: float) -> float:
    """Style importance after balancing and timestep scaling."""
    return imp.s_style * gamma.value * scale


def select_layer(s_content: float, s_style_effective: float) -> Choice:
    """Ties favor content."""
    return Choice.CONTENT if s_content >= s_style_effective else Choice.STYLE


@dataclass(frozen=True)
class _LayerScore:
    importance: LayerImportance
    abs_content: float
    abs_style: float


def _score_layer(content: LoraLayer, style: LoraLayer, params: ScheduleParams) -> _LayerScore:
    _check_same_target(content, style)
    delta_c = reconstruct_delta(content, params.apply_lora_alpha)
    delta_s = reconstruct_delta(style, params.apply_lora_alpha)
    elements = min(delta_c.size, delta_s.size)
    if params.k_override is not None:
        k = min(params.k_override, elements)
    else:
        k = default_k(content.rank, style.rank, elements)
    imp = LayerImportance(
        base_module=content.base_module,
        s_content=topk_abs_sum(delta_c, k),
        s_style=topk_abs_sum(delta_s, k),
        k_used=k,
        rank_content=content.rank,
        rank_style=style.rank,
    )
    return _LayerScore(imp, abs_sum(delta_c), abs_sum(delta_s))


def _map_ordered(fn, items, threads: int | None):
    workers = worker_count(threads)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _solo_map(content: LoraModel, style: LoraModel, matched: list[str]) -> dict[str, str]:
    matched_set = set(matched)
    solo = {base: "content" for base in content.layers if base not in matched_set}
    solo.update({base: "style" for base in style.layers if base not in matched_set})
    return solo


def _source_ref(model: LoraModel) -> SourceRef | None:
    if not model.source_path and not model.sha256:
        return None
    return SourceRef(path=model.source_path, sha256=model.sha256)


def build_schedule(
    content: LoraModel,
    style: LoraModel,
    params: ScheduleParams = ScheduleParams(),
    solo_policy: str = SOLO_PASS,
    threads: int | None = None,
) -> SelectionSchedule:
    """Score every matched layer once and fill the full (layer x step) grid.

    Layers present in only one checkpoint get a constant row for that side
    under the default solo-pass policy, or are omitted under "drop". Per-layer
    scoring may run on several workers; gamma and the grid are assembled in a
    fixed order, so the result does not depend on the worker count.
    """
    if solo_policy not in (SOLO_PASS, SOLO_DROP):
        raise ValueError(f"unknown solo policy {solo_policy!r}")
    matched = matched_layers(content, style)
    if not matched:
        raise PairingError(
            "checkpoints share no layers: "
            f"content has {sorted(content.layers)}, style has {sorted(style.layers)}"
        )

    scores = _map_ordered(
        lambda base: _score_layer(content.layers[base], style.layers[base], params),
        matched,
        threads,
    )
    content_total = 0.0
    style_total = 0.0
    for score in scores:
        content_total += score.abs_content
        style_total += score.abs_style
    gamma = _gamma_from_totals(content_total, style_total)

    scales = [scale_at(t, params) for t in range(params.total_steps)]
    solo = _solo_map(content, style, matched)

    layer_order: list[str] = []
    grid: list[str] = []
    importances: list[LayerImportance] = []
    by_base = {score.importance.base_module: score for score in scores}

    for base in list(content.layers) + [b for b in style.layers if b not in content.layers]:
        if base in by_base:
            imp = by_base[base].importance
            balanced = imp.s_style * gamma.value
            row = "".join(
                CONTENT if imp.s_content >= balanced * s else STYLE for s in scales
            )
            importances.append(imp)
        elif solo_policy == SOLO_DROP:
            continue
        else:
            row = (CONTENT if solo[base] == "content" else STYLE) * params.total_steps
        layer_order.append(base)
        grid.append(row)

    if solo_policy == SOLO_DROP:
        solo = {}

    kind = "topk_noscale" if params.scale_mode is ScaleMode.NONE else "topk"
    return SelectionSchedule(
        layer_order=layer_order,
        grid=grid,
        params=params,
        mode=ScheduleMode(kind=kind),
        gamma=gamma,
        importances=importances,
        solo=solo,
        solo_policy=solo_policy,
        content_source=_source_ref(content),
        style_source=_source_ref(style),
    )


def build_fixed_schedule(
    params: ScheduleParams,
    layers: list[str],
    literal_rule: bool = False,
    solo: dict[str, str] | None = None,
) -> SelectionSchedule:
    """Weight-free baseline: the per-step scale alone decides for all layers.

    Default reading keeps content in the early regime (scale <= 1 selects
    content); literal_rule=True inverts it (scale > 1 selects content).
    """
    if params.scale_mode is not ScaleMode.LINEAR:
        raise ValueError("fixed selection is defined for the linear scale mode")
    solo = solo or {}
    choices = []
    for t in range(params.total_steps):
        s = scale_at(t, params)
        content_now = (s > 1.0) if literal_rule else (s <= 1.0)
        choices.append(CONTENT if content_now else STYLE)
    shared_row = "".join(choices)
    grid = []
    for base in layers:
        if base in solo:
            grid.append((CONTENT if solo[base] == "content" else STYLE) * params.total_steps)
        else:
            grid.append(shared_row)
    return SelectionSchedule(
        layer_order=list(layers),
        grid=grid,
        params=params,
        mode=ScheduleMode(kind="fixed", literal_fixed_rule=literal_rule),
        solo=dict(solo),
    )


def build_random_schedule(
    params: ScheduleParams,
    layers: list[str],
    seed: int,
    p_content: float = 1.0 / 3.0,
    solo: dict[str, str] | None = None,
) -> SelectionSchedule:
    """Independent per-cell draws; content with probability p_content.

    Draws are consumed layer-major then step order from random.Random(seed),
    so one seed always reproduces one grid.
    """
    if not 0.0 <= p_content <= 1.0:
        raise ValueError(f"p_content must be within [0, 1], got {p_content}")
    solo = solo or {}
    rng = random.Random(seed)
    grid = []
    for base in layers:
        if base in solo:
            grid.append((CONTENT if solo[base] == "content" else STYLE) * params.total_steps)
        else:
            grid.append(
                "".join(
                    CONTENT if rng.random() < p_content else STYLE
                    for _ in range(params.total_steps)
                )
            )
    return SelectionSchedule(
        layer_order=list(layers),
        grid=grid,
        params=params,
        mode=ScheduleMode(kind="random", seed=seed, p_content=p_content),
        solo=dict(solo),
    )


def build_subset_schedule(
    params: ScheduleParams,
    layers: list[str],
    fraction: float,
    seed: int,
) -> SelectionSchedule:
    """Single-adapter analysis mask: per step, ceil(fraction*L) layers active.

    Grid cells reuse the C/S alphabet with "C" meaning the adapter is applied
    to that layer at that step.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be within [0, 1], got {fraction}")
    rng = random.Random(seed)
    n_layers = len(layers)
    n_active = math.ceil(fraction * n_layers)
    active_per_step = [
        frozenset(rng.sample(range(n_layers), n_active)) for _ in range(params.total_steps)
    ]
    grid = [
        "".join(CONTENT if i in active_per_step[t] else STYLE for t in range(params.total_steps))
        for i in range(n_layers)
    ]
    return SelectionSchedule(
        layer_order=list(layers),
        grid=grid,
        params=params,
        mode=ScheduleMode(kind="subset", seed=seed, fraction=fraction),
    )


def k_sweep(
    content: LoraModel,
    style: LoraModel,
    params: ScheduleParams,
    k_values: list[int],
    solo_policy: str = SOLO_PASS,
    threads: int | None = None,
) -> list[tuple[int, SelectionSchedule]]:
    """One schedule per K; gamma and the scale ramp are unaffected by K."""
    if not k_values:
        raise ValueError("k_values must be non-empty")
    return [
        (k, build_schedule(content, style, replace(params, k_override=k), solo_policy, threads))
        for k in k_values
    ]


def magnitude_histogram(
    model: LoraModel,
    apply_lora_alpha: bool = True,
    bins: int = 64,
    low: float = 1e-12,
    high: float = 1e4,
) -> tuple[list[float], list[int]]:
    """Log-scale histogram of |element| over all reconstructed weight updates.

    Magnitudes are clamped into [low, high] so the binning is fixed; exact
    zeros land in the first bin. Returns (bin_edges, counts) with len(edges)
    == bins + 1.
    """
    edges = np.logspace(math.log10(low), math.log10(high), bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    for layer in model.layers.values():
        delta = reconstruct_delta(layer, apply_lora_alpha)
        # clip against the realized edges so boundary values always land in a bin
        mags = np.clip(np.abs(delta.data).astype(np.float64), edges[0], edges[-1])
        hist, _ = np.histogram(mags, bins=edges)
        counts += hist
    return edges.tolist(), counts.tolist()
