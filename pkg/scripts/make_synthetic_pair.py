#!/usr/bin/env python3
"""Generate a seeded content/style LoRA checkpoint pair for demos and benchmarks.

The two files share layer names but differ in rank and weight scale, which is
the situation the balancing ratio exists for. Layer shapes loosely follow an
SDXL-style attention stack shrunk to the requested size.
"""

import argparse
import sys

import numpy as np

from lorafuse.matrixops import DenseMatrix
from lorafuse.safetensors_io import LoraLayer, LoraModel, NamingConvention, serialize_file

SUFFIXES = ("attn.to_q", "attn.to_k", "attn.to_v", "attn.to_out", "ff.proj")


def build_model(rng, n_layers, rank, dim, scale, alpha):
    layers = {}
    for i in range(n_layers):
        base = f"unet.blocks.{i // len(SUFFIXES)}.{SUFFIXES[i % len(SUFFIXES)]}"
        down = DenseMatrix.from_2d(
            (rng.standard_normal((rank, dim)) * scale).astype(np.float32)
        )
        up = DenseMatrix.from_2d(
            (rng.standard_normal((dim, rank)) * scale).astype(np.float32)
        )
        layers[base] = LoraLayer(
            base_module=base, down=down, up=up, rank=rank, alpha=alpha
        )
    return LoraModel(layers=layers, source_path="", naming_convention=NamingConvention.UP_DOWN)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--layers", type=int, default=20, help="layers per checkpoint (default: 20)")
    parser.add_argument("--dim", type=int, default=64, help="square base-weight dimension (default: 64)")
    parser.add_argument("--rank-content", type=int, default=4)
    parser.add_argument("--rank-style", type=int, default=8)
    parser.add_argument("--style-scale", type=float, default=3.0,
                        help="style weights are drawn this many times larger (default: 3)")
    parser.add_argument("--alpha", type=float, default=None, help="optional per-layer alpha scalar")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--content-out", default="content.safetensors")
    parser.add_argument("--style-out", default="style.safetensors")
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    content = build_model(rng, args.layers, args.rank_content, args.dim, 1.0, args.alpha)
    style = build_model(rng, args.layers, args.rank_style, args.dim, args.style_scale, args.alpha)
    serialize_file(content, args.content_out)
    serialize_file(style, args.style_out)
    print(f"wrote {args.content_out} ({args.layers} layers, rank {args.rank_content})")
    print(f"wrote {args.style_out} ({args.layers} layers, rank {args.rank_style})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
