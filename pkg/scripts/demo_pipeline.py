#!/usr/bin/env python3
"""Run the whole pipeline on a synthetic pair: analyze, schedule, merge, heatmap.

Artifacts land in the given directory (default ./demo-out). This is the same
code path as the installed `lorafuse` command; the script only strings the
subcommands together.
"""

import argparse
import os
import sys

from lorafuse.cli import main as lorafuse

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from make_synthetic_pair import main as make_pair  # noqa: E402


def run(argv):
    print("$ lorafuse " + " ".join(argv))
    rc = lorafuse(argv)
    if rc != 0:
        raise SystemExit(f"step failed with exit code {rc}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo-out", help="artifact directory (default: demo-out)")
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    content = os.path.join(args.out, "content.safetensors")
    style = os.path.join(args.out, "style.safetensors")
    manifest = os.path.join(args.out, "manifest.json")

    make_pair(["--seed", str(args.seed), "--content-out", content, "--style-out", style])
    run(["analyze", "--content", content, "--style", style])
    run([
        "schedule", "--content", content, "--style", style,
        "-o", manifest, "--steps", str(args.steps),
        "--heatmap", os.path.join(args.out, "grid.svg"),
    ])
    run([
        "merge", "--manifest", manifest, "--content", content, "--style", style,
        "-o", os.path.join(args.out, "steps"), "--boundaries-only",
    ])
    run(["heatmap", "--manifest", manifest, "-o", os.path.join(args.out, "grid.ppm")])
    print(f"\nall artifacts under {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
