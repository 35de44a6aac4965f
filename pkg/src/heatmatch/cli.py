"""Command-line interface.

Subcommands: precompute, train, infer, evaluate, bench-timing. Every
command takes --config; failures print one machine-parsable line
`error <category>: <message>` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import ToolkitError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="override output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatmatch",
        description="Unsupervised dense shape correspondence with heat-kernel supervision.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="populate mesh/spectral/descriptor caches")
    _add_common(p)

    p = sub.add_parser("train", help="run the training loop")
    _add_common(p)
    p.add_argument("--seed", type=int, help="override the network seed")
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")

    p = sub.add_parser("infer", help="dense correspondence between two meshes")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source mesh file")
    p.add_argument("--target", required=True, help="target mesh file")
    p.add_argument("--save-soft", action="store_true", help="also write the dense soft map (.npy)")

    p = sub.add_parser("evaluate", help="geodesic-error curves on the test pairs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("bench-timing", help="heat kernel vs geodesic wall-clock table")
    _add_common(p)
    p.add_argument("--mesh", action="append", required=True, dest="meshes",
                   help="mesh file; repeat for several sizes")
    p.add_argument("--time", type=float, default=0.1, help="diffusion time for the kernel")

    return parser


def _load_config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "precompute":
            report = pipeline.precompute(cfg)
            print(f"precompute: {report['computed']} computed, {report['cached']} cached, "
                  f"{report['recomputed']} recomputed over {len(report['meshes'])} meshes")
        elif args.command == "train":
            result = pipeline.train(cfg, resume=args.resume)
            print(f"train: final loss {result['final_loss']:.6g} -> {result['checkpoint']}")
        elif args.command == "infer":
            result = pipeline.infer(cfg, args.checkpoint, args.source, args.target,
                                    out_dir=cfg.output_dir, save_soft=args.save_soft)
            print(f"infer: wrote {result['match_file']}")
        elif args.command == "evaluate":
            result = pipeline.evaluate(cfg, args.checkpoint, out_dir=cfg.output_dir)
            print(f"evaluate: pooled auc {result['pooled']['auc']:.4f} "
                  f"over {len(result['pairs'])} pairs -> {result['out_dir']}")
        elif args.command == "bench-timing":
            rows = pipeline.bench_timing(cfg, args.meshes, diffusion_time=args.time,
                                         out_dir=cfg.output_dir)
            for r in rows:
                ratio = r["geodesic_seconds"] / max(r["heat_kernel_seconds"], 1e-12)
                print(f"N={r['n_vertices']}: kernel {r['heat_kernel_seconds']:.4f}s, "
                      f"eig+kernel {r['eigendecomposition_plus_kernel_seconds']:.3f}s, "
                      f"geodesic {r['geodesic_seconds']:.3f}s (x{ratio:.0f})")
    except ToolkitError as exc:
        print(f"error {exc.category}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error usage: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
