"""User-facing commands: cluster, train, synthesize, evaluate, ablate.

Output layout under ``output_dir``::

    cluster_index.json      fitted centroids + extractor
    cluster_counts.csv      per-cluster image counts (train split)
    synth/<direction>/      synthesized PNGs, routing.csv, errors/ maps
    eval/{x2y,y2x,combined}.{txt,json}
    ablation.{txt,json}

Checkpoints live under ``checkpoint_dir/cluster_<k>/``; evaluation and
ablation runs use ``seed_<s>`` (and variant) subdirectories.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .clustering import (
    ClusterIndex,
    assign_clusters,
    extract_features,
    kmeans_fit,
    partition_dataset,
)
from .config import RunConfig
from .data import DataError, Splits, ingest, load_domain, load_image, read_pairing_map, to_uint8, write_png
from .metrics import MetricsReport, aggregate, evaluate_pair, mean_metrics, render_table, ssim
from .trainer import CheckpointError, Dataset, ModelBundle, build_bundle, load_checkpoint, train_all

log = logging.getLogger(__name__)

DIRECTIONS = ("x2y", "y2x")
INDEX_FILE = "cluster_index.json"
COUNTS_FILE = "cluster_counts.csv"


class PipelineError(RuntimeError):
    pass


def _index_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / INDEX_FILE


def _bundle_config(cfg: RunConfig) -> dict:
    return {"generator": asdict(cfg.generator_config()), "discriminator": asdict(cfg.discriminator_config())}


def to_unit_interval(images: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(images, dtype=np.float64) + 1.0) / 2.0


# ------------------------------------------------------------------ cluster

def fit_index(cfg: RunConfig, splits: Splits) -> ClusterIndex:
    """K-means over the training images of the domains named by ``cluster_fit``."""
    ext = cfg.extractor()
    parts = []
    if cfg.cluster_fit in ("union", "x"):
        parts.append(extract_features(splits.train_x.images, ext, splits.train_x.ids))
    if cfg.cluster_fit in ("union", "y"):
        parts.append(extract_features(splits.train_y.images, ext, splits.train_y.ids))
    feats = np.concatenate(parts)
    return kmeans_fit(feats, cfg.K, cfg.kmeans_seed, cfg.kmeans_max_iter, cfg.kmeans_tol,
                      init=cfg.kmeans_init, extractor=ext)


def cmd_cluster(cfg: RunConfig, splits: Splits | None = None) -> ClusterIndex:
    splits = ingest(cfg.manifest()) if splits is None else splits
    index = fit_index(cfg, splits)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    index.save(out / INDEX_FILE)
    part = partition_dataset(splits.train_x.images, splits.train_y.images, index,
                             splits.train_x.ids, splits.train_y.ids)
    (out / COUNTS_FILE).write_text(part.counts_table())
    log.info("cluster index written to %s", out / INDEX_FILE)
    return index


def load_index(cfg: RunConfig) -> ClusterIndex:
    path = _index_path(cfg)
    if not path.is_file():
        raise PipelineError(f"no cluster index at {path}; run the cluster command first")
    return ClusterIndex.load(path)


# ------------------------------------------------------------------ train

def cmd_train(cfg: RunConfig, splits: Splits | None = None, index: ClusterIndex | None = None,
              seed: int | None = None, checkpoint_dir: str | None = None,
              access_log: list | None = None) -> list[tuple[ModelBundle, list[dict]]]:
    """Train one bundle per cluster. Never touches the pairing map."""
    splits = ingest(cfg.manifest()) if splits is None else splits
    index = load_index(cfg) if index is None else index
    tcfg = cfg.train_config(seed, checkpoint_dir)
    part = partition_dataset(splits.train_x.images, splits.train_y.images, index,
                             splits.train_x.ids, splits.train_y.ids)
    for (k, dom), donor in sorted(part.fallback.items()):
        log.warning("cluster %d has no %s images; borrowing them from cluster %d", k, dom, donor)
    return train_all(splits.train_x, splits.train_y, index, cfg.generator_config(),
                     cfg.discriminator_config(), tcfg, partition=part, workers=cfg.workers,
                     access_log=access_log)


def load_bundles(cfg: RunConfig, K: int, checkpoint_dir: str | Path | None = None) -> list[ModelBundle]:
    root = Path(cfg.checkpoint_dir if checkpoint_dir is None else checkpoint_dir)
    expected = _bundle_config(cfg)
    bundles = []
    for k in range(K):
        path = root / f"cluster_{k}" / "final"
        if not (path / "manifest.json").is_file():
            raise PipelineError(f"missing checkpoint for cluster {k} (looked in {path})")
        try:
            bundles.append(load_checkpoint(path, expected))
        except CheckpointError as exc:
            raise PipelineError(f"cluster {k}: {exc}") from exc
    return bundles


# ------------------------------------------------------------------ synthesize

def route(images: np.ndarray, ids: Sequence[str], index: ClusterIndex) -> np.ndarray:
    return assign_clusters(extract_features(images, index.extractor, ids), index)


def translate_routed(bundles: Sequence[ModelBundle], images: np.ndarray, routes: np.ndarray,
                     direction: str) -> np.ndarray:
    """Apply each image's routed generator; output in [-1, 1]."""
    out = np.empty(images.shape, dtype=np.float32)
    for k in np.unique(routes):
        sel = np.flatnonzero(routes == k)
        out[sel] = bundles[int(k)].translate(images[sel], direction)
    return out


def cycle_reconstruct(bundles: Sequence[ModelBundle], images: np.ndarray, routes: np.ndarray,
                      direction: str = "x2y") -> np.ndarray:
    """F(G(x)) for x2y or G(F(y)) for y2x, both halves by the routed bundle."""
    back = "y2x" if direction == "x2y" else "x2y"
    out = np.empty(images.shape, dtype=np.float32)
    for k in np.unique(routes):
        sel = np.flatnonzero(routes == k)
        b = bundles[int(k)]
        out[sel] = b.translate(b.translate(images[sel], direction), back)
    return out


def mean_cycle_ssim(bundles: Sequence[ModelBundle], data: Dataset, index: ClusterIndex,
                    direction: str = "x2y") -> float:
    routes = route(data.images, data.ids, index)
    rec = cycle_reconstruct(bundles, data.images, routes, direction)
    a, b = to_unit_interval(data.images[:, 0]), to_unit_interval(rec[:, 0])
    return float(np.mean([ssim(a[i], b[i]) for i in range(len(a))]))


def untrained_bundles(cfg: RunConfig, K: int, seed: int | None = None) -> list[ModelBundle]:
    """Fresh bundles initialized exactly as training would initialize them."""
    seed = cfg.seed if seed is None else seed
    tcfg = cfg.train_config(seed)
    return [build_bundle(cfg.generator_config(), cfg.discriminator_config(), seed + k, k, tcfg)
            for k in range(K)]


def error_map(synth01: np.ndarray, truth01: np.ndarray) -> np.ndarray:
    """Per-pixel |synth - truth| on [0, 1] as 8-bit grayscale."""
    e = np.abs(np.clip(synth01, 0, 1) - np.clip(truth01, 0, 1))
    return np.clip(np.rint(e * 255.0), 0, 255).astype(np.uint8)


@dataclass
class SynthesisResult:
    ids: list[str]
    routes: np.ndarray
    outputs: np.ndarray  # M×1×H×W in [-1, 1]


def cmd_synthesize(cfg: RunConfig, direction: str, input_dir: str | Path,
                   truth_dir: str | Path | None = None, out_dir: str | Path | None = None,
                   bundles: Sequence[ModelBundle] | None = None,
                   index: ClusterIndex | None = None) -> SynthesisResult:
    if direction not in DIRECTIONS:
        raise PipelineError(f"direction must be x2y or y2x, not {direction!r}")
    index = load_index(cfg) if index is None else index
    data = load_domain(input_dir, cfg.image_size, cfg.center_crop)
    routes = route(data.images, data.ids, index)
    if bundles is None:
        bundles = load_bundles(cfg, index.K)
    with dc.deterministic(cfg.deterministic):
        outputs = translate_routed(bundles, data.images, routes, direction)
    out = Path(cfg.output_dir) / "synth" / direction if out_dir is None else Path(out_dir)
    pixels = to_uint8(outputs[:, 0])
    for image_id, px in zip(data.ids, pixels):
        write_png(out / image_id, px)
    with open(out / "routing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cluster"])
        w.writerows(zip(data.ids, (int(r) for r in routes)))
    if truth_dir is not None:
        for image_id, synth in zip(data.ids, outputs[:, 0]):
            truth = load_image(Path(truth_dir) / image_id, cfg.image_size, cfg.center_crop)
            write_png(out / "errors" / image_id, error_map(to_unit_interval(synth), to_unit_interval(truth)))
    return SynthesisResult(list(data.ids), routes, outputs)


# ------------------------------------------------------------------ evaluate

def _truth_pairs(cfg: RunConfig, test: Dataset, pairs: dict[str, str], direction: str) -> np.ndarray:
    """Ground-truth images in the opposite domain for each test id."""
    if direction == "x2y":
        lookup, root = pairs, cfg.data_y
    else:
        lookup, root = {v: k for k, v in pairs.items()}, cfg.data_x
    out = []
    for image_id in test.ids:
        if image_id not in lookup:
            raise PipelineError(f"pairing map has no partner for {direction[0]} image {image_id!r}")
        out.append(load_image(Path(root) / lookup[image_id], cfg.image_size, cfg.center_crop))
    return np.stack(out)


def evaluate_bundles(cfg: RunConfig, bundles: Sequence[ModelBundle], index: ClusterIndex,
                     splits: Splits, pairs: dict[str, str]) -> dict[str, dict]:
    """Mean metrics per direction and pooled over both directions for one trained model set."""
    per_image: dict[str, list[dict]] = {}
    for direction, test in (("x2y", splits.test_x), ("y2x", splits.test_y)):
        if len(test) == 0:
            raise PipelineError(f"test split for {direction} is empty")
        truth = to_unit_interval(_truth_pairs(cfg, test, pairs, direction))
        routes = route(test.images, test.ids, index)
        synth = to_unit_interval(translate_routed(bundles, test.images, routes, direction)[:, 0])
        per_image[direction] = [
            evaluate_pair(truth[i], synth[i], cfg.psnr_literal, cfg.ssim_mode) for i in range(len(test))
        ]
    result = {d: mean_metrics(rows) for d, rows in per_image.items()}
    result["combined"] = mean_metrics(per_image["x2y"] + per_image["y2x"])
    return result


def run_seed(cfg: RunConfig, seed: int, splits: Splits, index: ClusterIndex, pairs: dict[str, str],
             checkpoint_root: str | Path) -> dict[str, dict]:
    ckpt = Path(checkpoint_root) / f"seed_{seed}"
    bundles = None
    if cfg.reuse_checkpoints:
        try:
            bundles = load_bundles(cfg, index.K, ckpt)
            log.info("seed %d: reusing checkpoints in %s", seed, ckpt)
        except PipelineError:
            bundles = None
    if bundles is None:
        trained = cmd_train(cfg, splits, index, seed=seed, checkpoint_dir=str(ckpt))
        bundles = [b for b, _ in trained]
    with dc.deterministic(cfg.deterministic):
        return evaluate_bundles(cfg, bundles, index, splits, pairs)


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError:
        raise PipelineError(f"seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise PipelineError("at least one seed is required")
    return seeds


def _require_pairs(cfg: RunConfig) -> dict[str, str]:
    if not cfg.pairs:
        raise PipelineError(
            "no pairing map configured: evaluation compares against paired ground truth "
            "(training does not need pairs; set 'pairs = <csv>' for evaluate/ablate)"
        )
    try:
        return read_pairing_map(cfg.pairs)
    except DataError as exc:
        raise PipelineError(str(exc)) from exc


def cmd_evaluate(cfg: RunConfig, seeds: Sequence[int]) -> dict[str, MetricsReport]:
    pairs = _require_pairs(cfg)
    splits = ingest(cfg.manifest())
    index = fit_index(cfg, splits)
    runs = [run_seed(cfg, s, splits, index, pairs, cfg.checkpoint_dir) for s in seeds]
    out = Path(cfg.output_dir) / "eval"
    reports = {}
    for key in DIRECTIONS + ("combined",):
        rep = aggregate([r[key] for r in runs])
        rep.write(out / key, label=key)
        reports[key] = rep
    return reports


# ------------------------------------------------------------------ ablate

@dataclass(frozen=True)
class Variant:
    name: str
    dual_contrast: bool
    cbam: bool
    clustering: bool

    def apply(self, cfg: RunConfig) -> RunConfig:
        return cfg.replace(
            beta_dc=cfg.beta_dc if self.dual_contrast else 0.0,
            use_cbam=self.cbam,
            K=cfg.K if self.clustering else 1,
        )

    @property
    def slug(self) -> str:
        return self.name.lower().replace(" ", "_").replace("/", "")


def ablation_variants() -> list[Variant]:
    rows = []
    for base, dcl, att in (("CycleGAN", False, False), ("DC-cycleGAN", True, False),
                           ("A-cycleGAN", False, True), ("ADC-cycleGAN", True, True)):
        for clus in (False, True):
            rows.append(Variant(f"{base} {'w/' if clus else 'wo/'} clustering", dcl, att, clus))
    return rows


def cmd_ablate(cfg: RunConfig, seeds: Sequence[int] | None = None) -> tuple[str, dict]:
    """Train and evaluate the 8 variants with shared seeds; one combined-metrics table."""
    seeds = parse_seeds(cfg.ablation_seeds) if seeds is None else list(seeds)
    pairs = _require_pairs(cfg)
    splits = ingest(cfg.manifest())
    rows, summary = [], {}
    for v in ablation_variants():
        vcfg = v.apply(cfg)
        index = fit_index(vcfg, splits)
        root = Path(cfg.checkpoint_dir) / "ablation" / v.slug
        runs = [run_seed(vcfg, s, splits, index, pairs, root)["combined"] for s in seeds]
        rep = aggregate(runs)
        g = untrained_bundles(vcfg, 1)[0].G
        rows.append((v.name, rep))
        summary[v.name] = {
            **rep.to_dict(),
            "beta_dc": vcfg.beta_dc,
            "use_cbam": vcfg.use_cbam,
            "K": vcfg.K,
            "generator_parameters": g.num_parameters(),
        }
    table = render_table(rows, title=f"Ablation (combined x2y + y2x, seeds {','.join(map(str, seeds))})")
    counts = "\n".join(f"{name}: generator parameters {s['generator_parameters']}" for name, s in summary.items())
    text = table + "\n" + counts + "\n"
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return text, summary

