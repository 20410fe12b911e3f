"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DataError, make_toy_data
from .clustering import ClusteringError
from .trainer import CheckpointError, TrainingError
from . import pipeline
from .metrics import render_table


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adc-cyclegan", description="Cluster-routed unpaired image translation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("cluster", "fit the K-means routing index on the training split"),
                        ("train", "train one model per cluster"),
                        ("ablate", "run the 8-variant ablation grid")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)

    s = sub.add_parser("synthesize", help="translate a directory of PNGs")
    s.add_argument("--config", required=True)
    s.add_argument("--direction", required=True, choices=pipeline.DIRECTIONS)
    s.add_argument("--input", required=True)
    s.add_argument("--truth", help="ground-truth directory; enables error maps")
    s.add_argument("--out", help="output directory (default <output_dir>/synth/<direction>)")

    s = sub.add_parser("evaluate", help="train per seed and report MAE/PSNR/SSIM")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default="1,2,3,4,5")

    s = sub.add_parser("make-toy-data", help="write the two-domain toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=64)
    return p


def run(args: argparse.Namespace) -> int:
    if args.command == "make-toy-data":
        groups = make_toy_data(args.out, args.n, args.seed, args.side)
        print(f"wrote {args.n} scene pairs to {args.out} "
              f"({len(groups['large'])} large, {len(groups['small'])} small)")
        return 0
    cfg = load_config(args.config)
    if args.command == "cluster":
        index = pipeline.cmd_cluster(cfg)
        print((Path(cfg.output_dir) / pipeline.COUNTS_FILE).read_text(), end="")
        print(f"K={index.K} index written to {Path(cfg.output_dir) / pipeline.INDEX_FILE}")
    elif args.command == "train":
        results = pipeline.cmd_train(cfg)
        for bundle, hist in results:
            g = [r["g_loss"] for r in hist if r["unit_kind"] == "G"]
            print(f"cluster {bundle.cluster_id}: {len(hist)} units, g_loss {g[0]:.4f} -> {g[-1]:.4f}")
    elif args.command == "synthesize":
        res = pipeline.cmd_synthesize(cfg, args.direction, args.input, args.truth, args.out)
        print(f"synthesized {len(res.ids)} images")
    elif args.command == "evaluate":
        reports = pipeline.cmd_evaluate(cfg, pipeline.parse_seeds(args.seeds))
        print(render_table(list(reports.items())), end="")
    elif args.command == "ablate":
        text, _ = pipeline.cmd_ablate(cfg)
        print(text, end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, DataError, ClusteringError, TrainingError, CheckpointError,
            pipeline.PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
