"""Command-line front end: analyze, schedule, merge, heatmap, ablate.

Exit codes: 0 success, 2 input or format errors (bad flags, unreadable or
malformed files, digest mismatches), 1 internal errors. All file outputs are
written atomically and are byte-reproducible across runs and thread counts;
KLORA_THREADS caps the worker pool when --threads is not given.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import __version__
from .errors import DigestMismatchError, LoraFuseError
from .export import boundary_steps, export_merged_lora, render_heatmap
from .fileio import sha256_file
from .manifest import canonical_json, read_manifest, switch_step_of, write_manifest
from .safetensors_io import LoraModel, parse_file
from .selection import (
    SOLO_DROP,
    SOLO_PASS,
    ScaleMode,
    ScheduleParams,
    SelectionSchedule,
    build_fixed_schedule,
    build_random_schedule,
    build_schedule,
    build_subset_schedule,
    k_sweep,
    magnitude_histogram,
    matched_layers,
)


def _add_pair_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--content", required=True, metavar="FILE", help="content LoRA (safetensors)")
    p.add_argument("--style", required=True, metavar="FILE", help="style LoRA (safetensors)")


def _add_param_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("schedule parameters")
    g.add_argument("--steps", type=int, default=50, help="denoising steps (default: 50)")
    g.add_argument("--alpha", type=float, default=1.5, help="scale slope (default: 1.5)")
    g.add_argument("--beta", type=float, default=0.5, help="scale offset (default: 0.5)")
    g.add_argument(
        "--scale-mode",
        choices=[m.value for m in ScaleMode],
        default=ScaleMode.LINEAR.value,
        help="step-dependent scale shape (default: linear)",
    )
    g.add_argument(
        "--alpha-prime", type=float, default=1.5, help="modular-scale slope (default: 1.5)"
    )
    g.add_argument(
        "--beta-prime", type=float, default=1.3, help="modular-scale offset (default: 1.3)"
    )
    g.add_argument(
        "--k", type=int, default=None, metavar="K",
        help="override top-K element count (default: rank_content * rank_style per layer)",
    )
    g.add_argument(
        "--raw-factors", action="store_true",
        help="skip the alpha/rank scaling when reconstructing weight updates",
    )


def _add_common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="worker count (default: KLORA_THREADS or CPU count)")
    p.add_argument("--json", action="store_true", help="machine-readable report on stdout")


def _add_solo_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--solo-policy", choices=[SOLO_PASS, SOLO_DROP], default=SOLO_PASS,
        help="layers present in only one checkpoint: keep that side every step, or drop (default: %(default)s)",
    )


def _params_from(args: argparse.Namespace) -> ScheduleParams:
    return ScheduleParams(
        total_steps=args.steps,
        alpha=args.alpha,
        beta=args.beta,
        scale_mode=ScaleMode(args.scale_mode),
        alpha_prime=args.alpha_prime,
        beta_prime=args.beta_prime,
        k_override=args.k,
        apply_lora_alpha=not args.raw_factors,
    )


def _load_pair(args: argparse.Namespace) -> tuple[LoraModel, LoraModel]:
    return parse_file(args.content), parse_file(args.style)


def _print(line: str) -> None:
    sys.stdout.write(line + "\n")


def _emit_json(doc: dict) -> None:
    _print(canonical_json(doc))


def _histogram_report(name: str, model: LoraModel, apply_lora_alpha: bool) -> list[str]:
    edges, counts = magnitude_histogram(model, apply_lora_alpha)
    total = sum(counts)
    lines = [f"histogram {name}: {total} elements, 64 log bins over |element|"]
    for i, count in enumerate(counts):
        if count:
            lines.append(f"  [{edges[i]:.3e}, {edges[i + 1]:.3e}) {count}")
    return lines


def _schedule_summary(schedule: SelectionSchedule) -> dict:
    doc: dict = {
        "layers": len(schedule.layer_order),
        "steps": schedule.total_steps,
        "mode": schedule.mode.kind,
    }
    if schedule.gamma is not None:
        doc["gamma"] = schedule.gamma.value
    return doc


def _report_schedule(schedule: SelectionSchedule, out_path: str, as_json: bool) -> None:
    if as_json:
        doc = _schedule_summary(schedule)
        doc["manifest"] = out_path
        _emit_json(doc)
        return
    _print(f"manifest {out_path}: {len(schedule.layer_order)} layers x {schedule.total_steps} steps")
    if schedule.gamma is not None:
        _print(f"gamma {schedule.gamma.value:.6g}")
    for base, row in zip(schedule.layer_order, schedule.grid):
        sw = switch_step_of(row)
        _print(f"  {base}: switch_step {'-' if sw is None else sw}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_analyze(args: argparse.Namespace) -> int:
    content, style = _load_pair(args)
    params = _params_from(args)
    schedule = build_schedule(content, style, params, threads=args.threads)
    assert schedule.gamma is not None
    if args.json:
        doc = {
            "gamma": {
                "value": schedule.gamma.value,
                "content_total": schedule.gamma.content_total,
                "style_total": schedule.gamma.style_total,
            },
            "layers": [
                {
                    "base_module": imp.base_module,
                    "s_content": imp.s_content,
                    "s_style": imp.s_style,
                    "k_used": imp.k_used,
                    "rank_content": imp.rank_content,
                    "rank_style": imp.rank_style,
                }
                for imp in schedule.importances
            ],
            "histograms": {},
        }
        for name, model in (("content", content), ("style", style)):
            edges, counts = magnitude_histogram(model, params.apply_lora_alpha)
            doc["histograms"][name] = {"bin_edges": edges, "counts": counts}
        _emit_json(doc)
        return 0
    _print(f"matched layers: {len(schedule.importances)}")
    for imp in schedule.importances:
        _print(
            f"  {imp.base_module}: S_c {imp.s_content:.6g}  S_s {imp.s_style:.6g}"
            f"  K {imp.k_used}  ranks {imp.rank_content}/{imp.rank_style}"
        )
    for base, side in sorted(schedule.solo.items()):
        _print(f"  {base}: only in {side} checkpoint")
    g = schedule.gamma
    _print(f"gamma {g.value:.6g} (content total {g.content_total:.6g} / style total {g.style_total:.6g})")
    for name, model in (("content", content), ("style", style)):
        for line in _histogram_report(name, model, params.apply_lora_alpha):
            _print(line)
    return 0


def _cmd_schedule(args: argparse.Namespace) -> int:
    content, style = _load_pair(args)
    schedule = build_schedule(
        content, style, _params_from(args), solo_policy=args.solo_policy, threads=args.threads
    )
    write_manifest(schedule, args.output)
    if args.heatmap:
        render_heatmap(schedule, args.heatmap, _heatmap_format(args.heatmap, args.heatmap_format))
    _report_schedule(schedule, args.output, args.json)
    return 0


def _step_name(step: int, total_steps: int) -> str:
    width = len(str(total_steps - 1))
    return f"step-{step:0{width}d}.safetensors"


def _verify_digest(kind: str, path: str, schedule: SelectionSchedule) -> None:
    ref = schedule.content_source if kind == "content" else schedule.style_source
    if ref is None or not ref.sha256:
        return
    actual = sha256_file(path)
    if actual != ref.sha256:
        raise DigestMismatchError(
            f"{kind} checkpoint {path} has SHA-256 {actual}, manifest expects {ref.sha256}"
        )


def _cmd_merge(args: argparse.Namespace) -> int:
    schedule = read_manifest(args.manifest)
    content = parse_file(args.content)
    style = parse_file(args.style) if args.style else None
    if not args.no_verify:
        _verify_digest("content", args.content, schedule)
        if args.style:
            _verify_digest("style", args.style, schedule)
    if args.step is not None:
        steps = sorted(set(args.step))
        for step in steps:
            if not 0 <= step < schedule.total_steps:
                raise ValueError(f"--step {step} outside [0, {schedule.total_steps - 1}]")
    elif args.boundaries_only:
        steps = boundary_steps(schedule)
    else:
        steps = list(range(schedule.total_steps))
    os.makedirs(args.output, exist_ok=True)
    written = []
    for step in steps:
        path = os.path.join(args.output, _step_name(step, schedule.total_steps))
        export_merged_lora(content, style, schedule, step, path)
        written.append(path)
    if args.json:
        _emit_json({"written": written})
    else:
        for path in written:
            _print(f"wrote {path}")
    return 0


def _heatmap_format(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    ext = os.path.splitext(path)[1].lower().lstrip(".")
    if ext in ("svg", "ppm"):
        return ext
    raise ValueError(f"cannot infer heatmap format from {path!r}; pass --format")


def _cmd_heatmap(args: argparse.Namespace) -> int:
    schedule = read_manifest(args.manifest)
    fmt = _heatmap_format(args.output, args.format)
    render_heatmap(schedule, args.output, fmt, cell=args.cell)
    if args.json:
        _emit_json({"written": args.output, "format": fmt})
    else:
        _print(f"wrote {args.output}")
    return 0


def _fixed_layer_sets(args: argparse.Namespace) -> tuple[list[str], dict[str, str]]:
    """Layer order and solo map for the weight-free ablation modes."""
    content, style = _load_pair(args)
    matched = set(matched_layers(content, style))
    order = list(content.layers) + [b for b in style.layers if b not in content.layers]
    solo = {}
    for base in order:
        if base not in matched:
            solo[base] = "content" if base in content.layers else "style"
    if args.solo_policy == SOLO_DROP:
        order = [b for b in order if b not in solo]
        solo = {}
    return order, solo


def _cmd_ablate(args: argparse.Namespace) -> int:
    params = _params_from(args)
    if args.mode == "ksweep":
        if not args.k_values:
            raise ValueError("ksweep needs --k-values")
        content, style = _load_pair(args)
        pairs = k_sweep(content, style, params, args.k_values, args.solo_policy, args.threads)
        os.makedirs(args.output, exist_ok=True)
        written = []
        for k, schedule in pairs:
            path = os.path.join(args.output, f"k-{k}.json")
            write_manifest(schedule, path)
            written.append(path)
        if args.json:
            _emit_json({"written": written})
        else:
            for path in written:
                _print(f"wrote {path}")
        return 0

    if args.mode == "noscale":
        content, style = _load_pair(args)
        params = replace(params, scale_mode=ScaleMode.NONE)
        schedule = build_schedule(content, style, params, args.solo_policy, args.threads)
    elif args.mode == "fixed":
        layers, solo = _fixed_layer_sets(args)
        schedule = build_fixed_schedule(params, layers, args.literal_fixed_rule, solo)
    elif args.mode == "random":
        if args.seed is None:
            raise ValueError("random mode needs --seed")
        layers, solo = _fixed_layer_sets(args)
        schedule = build_random_schedule(params, layers, args.seed, args.p_content, solo)
    elif args.mode == "subset":
        if args.seed is None:
            raise ValueError("subset mode needs --seed")
        model = parse_file(args.content)
        schedule = build_subset_schedule(params, list(model.layers), args.fraction, args.seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown ablation mode {args.mode!r}")

    write_manifest(schedule, args.output)
    _report_schedule(schedule, args.output, args.json)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorafuse",
        description="Training-free fusion of a content and a style LoRA by per-layer top-K selection.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("analyze", help="print per-layer scores, gamma, and magnitude histograms")
    _add_pair_args(p)
    _add_param_args(p)
    _add_common_args(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("schedule", help="build the selection grid and write a manifest")
    _add_pair_args(p)
    _add_param_args(p)
    _add_solo_args(p)
    _add_common_args(p)
    p.add_argument("-o", "--output", required=True, metavar="FILE", help="manifest path")
    p.add_argument("--heatmap", metavar="FILE", help="also render a heatmap here")
    p.add_argument("--heatmap-format", choices=["svg", "ppm"], default=None)
    p.set_defaults(func=_cmd_schedule)

    p = sub.add_parser("merge", help="write per-step merged checkpoints from a manifest")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--content", required=True, metavar="FILE", help="content LoRA (safetensors)")
    p.add_argument("--style", metavar="FILE", help="style LoRA (omit for subset-mode manifests)")
    p.add_argument("-o", "--output", required=True, metavar="DIR", help="output directory")
    p.add_argument("--step", type=int, action="append", metavar="N", help="export only step N (repeatable)")
    p.add_argument(
        "--boundaries-only", action="store_true",
        help="export only steps where some layer switches source",
    )
    p.add_argument("--no-verify", action="store_true", help="skip SHA-256 checks against the manifest")
    p.add_argument("--json", action="store_true", help="machine-readable report on stdout")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("heatmap", help="render a manifest's grid as SVG or PPM")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("-o", "--output", required=True, metavar="FILE")
    p.add_argument("--format", choices=["svg", "ppm"], default=None, help="default: by extension")
    p.add_argument("--cell", type=int, default=4, help="cell size in pixels (default: 4)")
    p.add_argument("--json", action="store_true", help="machine-readable report on stdout")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("ablate", help="baseline and sweep schedules for comparison")
    p.add_argument(
        "--mode", required=True, choices=["fixed", "random", "subset", "noscale", "ksweep"],
    )
    p.add_argument("--content", required=True, metavar="FILE", help="content LoRA (safetensors)")
    p.add_argument("--style", metavar="FILE", help="style LoRA (not used by subset mode)")
    _add_param_args(p)
    _add_solo_args(p)
    _add_common_args(p)
    p.add_argument("-o", "--output", required=True, metavar="PATH", help="manifest path (ksweep: directory)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (random and subset modes)")
    p.add_argument("--p-content", type=float, default=1.0 / 3.0, help="random mode: P(content) per cell")
    p.add_argument("--fraction", type=float, default=1.0 / 3.0, help="subset mode: active layer fraction")
    p.add_argument("--k-values", type=_int_list, default=None, metavar="K1,K2,...", help="ksweep mode")
    p.add_argument(
        "--literal-fixed-rule", action="store_true",
        help="fixed mode: select content when scale > 1 instead of scale <= 1",
    )
    p.set_defaults(func=_cmd_ablate)
    return parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed the diagnostic
        return int(exc.code or 0)
    if args.subcommand == "ablate" and args.mode != "subset" and not args.style:
        sys.stderr.write("error: --style is required for this ablation mode\n")
        return 2
    try:
        return args.func(args)
    except (LoraFuseError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except Exception as exc:  # pragma: no cover - safety net
        sys.stderr.write(f"internal error: {exc!r}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
