"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Values are parsed according
to the type of the key's default; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .clustering import FeatureExtractorConfig
from .data import DatasetManifest
from .losses import LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    data_x: str = "data/X"
    data_y: str = "data/Y"
    pairs: str = ""
    split_seed: int = 0
    train_fraction: float = 0.9
    image_size: int = 64
    center_crop: float = 1.0
    # clustering
    K: int = 4
    feature_extractor: str = "downsample_pixels"
    feature_side: int = 16
    embeddings_path: str = ""
    embeddings_dim: int = 0
    kmeans_seed: int = 0
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6
    kmeans_init: str = "k-means++"
    cluster_fit: str = "union"  # union | x | y
    # networks
    gen_width: int = 16
    disc_width: int = 16
    n_res: int = 4
    use_cbam: bool = True
    reduction_ratio: int = 8
    init_std: float = 0.02
    norm_eps: float = 1e-5
    lrelu_slope: float = 0.2
    # losses
    lambda_cycle: float = 10.0
    beta_dc: float = 0.5
    # training
    epochs: int = 30
    batch_size: int = 1
    g_steps_per_d_step: int = 5
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: bool = False
    seed: int = 0
    deterministic: bool = True
    workers: int = 1
    # outputs
    output_dir: str = "runs"
    checkpoint_dir: str = "runs/checkpoints"
    # evaluation
    psnr_literal: bool = False
    ssim_mode: str = "window"
    reuse_checkpoints: bool = False
    ablation_seeds: str = "1"

    def __post_init__(self):
        if self.cluster_fit not in ("union", "x", "y"):
            raise ConfigError(f"cluster_fit must be union, x or y, not {self.cluster_fit!r}")
        if self.ssim_mode not in ("window", "global"):
            raise ConfigError(f"ssim_mode must be window or global, not {self.ssim_mode!r}")

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(self.data_x, self.data_y, self.pairs, self.split_seed,
                               self.train_fraction, self.image_size, self.center_crop)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(1, self.gen_width, self.n_res, self.image_size, self.use_cbam,
                               self.reduction_ratio, self.init_std, self.norm_eps)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(1, self.disc_width, self.image_size, init_std=self.init_std,
                                   norm_eps=self.norm_eps, lrelu_slope=self.lrelu_slope)

    def extractor(self) -> FeatureExtractorConfig:
        if self.feature_extractor == "external_embeddings":
            return FeatureExtractorConfig.embeddings(self.embeddings_path, self.embeddings_dim)
        return FeatureExtractorConfig.pixels(self.feature_side)

    def train_config(self, seed: int | None = None, checkpoint_dir: str | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            g_steps_per_d_step=self.g_steps_per_d_step,
            weights=LossWeights(self.lambda_cycle, self.beta_dc),
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            lr_decay=self.lr_decay,
            seed=self.seed if seed is None else seed,
            deterministic=self.deterministic,
            checkpoint_dir=self.checkpoint_dir if checkpoint_dir is None else checkpoint_dir,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def parse_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse(key, raw, defaults[key])
    if base_dir is not None:
        for k in ("data_x", "data_y", "pairs", "output_dir", "checkpoint_dir", "embeddings_path"):
            v = values.get(k, defaults[k])
            if v and not Path(v).is_absolute():
                values[k] = str(Path(base_dir) / v)
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    """Read a config file; relative paths inside resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), base_dir=path.parent)
