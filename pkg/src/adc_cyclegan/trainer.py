"""Per-cluster ADC-cycleGAN training, scheduling and checkpoints."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .clustering import ClusterIndex, Partition, partition_dataset
from .diffcore import Variable
from .losses import (
    GeneratorTerms,
    LossWeights,
    discriminator_loss,
    dual_contrast_term,
    generator_objective,
)
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network

log = logging.getLogger(__name__)

MODEL_NAME = "adc-cyclegan"
NETWORKS = ("G", "F", "D_X", "D_Y")
HISTORY_FIELDS = ("unit_index", "unit_kind", "g_loss", "d_x_loss", "d_y_loss", "cycle_term", "dc_term")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class Dataset:
    """Images in [-1, 1], shape M×1×H×W, with one id per image."""

    images: np.ndarray
    ids: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.images):
            raise ValueError("one id per image required")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], [self.ids[i] for i in idx])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    g_steps_per_d_step: int = 5
    weights: LossWeights = LossWeights()
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: bool = False
    seed: int = 0
    deterministic: bool = True
    checkpoint_dir: str = ""

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.g_steps_per_d_step < 1:
            raise ValueError("epochs, batch_size and g_steps_per_d_step must all be >= 1")


class Adam:
    def __init__(self, params: dict[str, Variable], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        step = lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= p.dtype.type(step) * m / (np.sqrt(v) + p.dtype.type(self.eps))


@dataclass
class ModelBundle:
    G: Generator
    F: Generator
    D_X: Discriminator
    D_Y: Discriminator
    gcfg: GeneratorConfig
    dcfg: DiscriminatorConfig
    optimizers: dict[str, Adam] = field(default_factory=dict)
    cluster_id: int = 0
    unit_index: int = 0

    def networks(self) -> dict[str, Network]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    def config(self) -> dict:
        return {"generator": asdict(self.gcfg), "discriminator": asdict(self.dcfg)}

    def translate(self, images: np.ndarray, direction: str = "x2y", batch: int = 8) -> np.ndarray:
        net = self.G if direction == "x2y" else self.F
        if direction not in ("x2y", "y2x"):
            raise ValueError(f"unknown direction {direction!r}")
        out = []
        with dc.no_grad():
            for i in range(0, len(images), batch):
                chunk = np.asarray(images[i:i + batch], dtype=self.G.params["stem.conv.weight"].dtype)
                out.append(net(Variable(chunk)).data)
        return np.concatenate(out) if out else np.zeros_like(images)


def build_bundle(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, seed: int = 0,
                 cluster_id: int = 0, cfg: TrainConfig = TrainConfig(), dtype=np.float32) -> ModelBundle:
    rng = np.random.default_rng(seed)
    b = ModelBundle(
        G=Generator(gcfg, rng, dtype),
        F=Generator(gcfg, rng, dtype),
        D_X=Discriminator(dcfg, rng, dtype),
        D_Y=Discriminator(dcfg, rng, dtype),
        gcfg=gcfg,
        dcfg=dcfg,
        cluster_id=cluster_id,
    )
    for name, net in b.networks().items():
        b.optimizers[name] = Adam(net.params, cfg.learning_rate, (cfg.beta1, cfg.beta2))
    return b


# ------------------------------------------------------------------ scheduling

def unit_kind(unit_index: int, g_steps_per_d_step: int = 5) -> str:
    return "D" if unit_index % (g_steps_per_d_step + 1) == g_steps_per_d_step else "G"


def schedule(n_units: int, g_steps_per_d_step: int = 5, start: int = 0) -> list[str]:
    return [unit_kind(i, g_steps_per_d_step) for i in range(start, start + n_units)]


def units_per_epoch(n_x: int, n_y: int, batch_size: int) -> int:
    return math.ceil(max(n_x, n_y) / batch_size)


@contextlib.contextmanager
def frozen(*nets: Network):
    """Stop gradient accumulation into the given networks' parameters."""
    for n in nets:
        n.set_requires_grad(False)
    try:
        yield
    finally:
        for n in nets:
            n.set_requires_grad(True)


def _check_finite(unit: int, row: dict) -> None:
    required = ("g_loss", "cycle_term") if row["unit_kind"] == "G" else ("d_x_loss", "d_y_loss", "dc_term")
    if not all(math.isfinite(row[k]) for k in required):
        breakdown = {k: row[k] for k in required}
        raise TrainingError(f"non-finite loss at unit {unit}: {breakdown}")


def generator_unit(bundle: ModelBundle, x: np.ndarray, y: np.ndarray, w: LossWeights,
                   lr: float | None = None, update: bool = True) -> dict:
    G, F = bundle.G, bundle.F
    xv, yv = Variable(x), Variable(y)
    with frozen(bundle.D_X, bundle.D_Y):
        fake_y = G(xv)
        fake_x = F(yv)
        terms = GeneratorTerms(
            d_y_of_fake_y=bundle.D_Y(fake_y),
            d_x_of_fake_x=bundle.D_X(fake_x),
            x=xv,
            x_rec=F(fake_y),
            y=yv,
            y_rec=G(fake_x),
        )
        g_loss, parts = generator_objective(terms, w)
        if update:
            g_loss.backward()
    if update:
        bundle.optimizers["G"].step(lr)
        bundle.optimizers["F"].step(lr)
    G.zero_grad()
    F.zero_grad()
    return {"g_loss": g_loss.item(), "cycle_term": parts["cycle"]}


def discriminator_unit(bundle: ModelBundle, x: np.ndarray, y: np.ndarray, x_neg: np.ndarray,
                       y_neg: np.ndarray, w: LossWeights, lr: float | None = None) -> dict:
    with dc.no_grad():
        fake_y = Variable(bundle.G(Variable(x)).data)
        fake_x = Variable(bundle.F(Variable(y)).data)
    xv, yv, xn, yn = Variable(x), Variable(y), Variable(x_neg), Variable(y_neg)
    # D_Y separates real Y from G(x) and from source-domain X negatives; D_X mirrors it
    neg_y, neg_x = bundle.D_Y(xn), bundle.D_X(yn)
    d_y = discriminator_loss(bundle.D_Y(yv), bundle.D_Y(fake_y), neg_y, w)
    d_x = discriminator_loss(bundle.D_X(xv), bundle.D_X(fake_x), neg_x, w)
    dc_val = (dual_contrast_term(neg_y, w).item() + dual_contrast_term(neg_x, w).item()) if w.beta_dc else 0.0
    d_y.backward()
    d_x.backward()
    bundle.optimizers["D_X"].step(lr)
    bundle.optimizers["D_Y"].step(lr)
    bundle.D_X.zero_grad()
    bundle.D_Y.zero_grad()
    return {"d_x_loss": d_x.item(), "d_y_loss": d_y.item(), "dc_term": dc_val}


def train_step(bundle: ModelBundle, batch_x: np.ndarray, batch_y: np.ndarray,
               negatives: tuple[np.ndarray, np.ndarray] | None, cfg: TrainConfig,
               lr: float | None = None) -> dict:
    """Run the next scheduled unit (generator or discriminator) on ``bundle``."""
    kind = unit_kind(bundle.unit_index, cfg.g_steps_per_d_step)
    row = {k: float("nan") for k in HISTORY_FIELDS}
    row["unit_index"] = bundle.unit_index
    row["unit_kind"] = kind
    if kind == "G":
        row.update(generator_unit(bundle, batch_x, batch_y, cfg.weights, lr))
    else:
        if negatives is None:
            raise ValueError("discriminator unit needs source-domain negatives")
        row.update(discriminator_unit(bundle, batch_x, batch_y, negatives[0], negatives[1], cfg.weights, lr))
    _check_finite(bundle.unit_index, row)
    bundle.unit_index += 1
    return row


class _Stream:
    """Endless reshuffled index stream over one domain."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return np.array(out)


def train_cluster(data_x: Dataset, data_y: Dataset, gcfg: GeneratorConfig, dcfg: DiscriminatorConfig,
                  cfg: TrainConfig = TrainConfig(), cluster_id: int = 0,
                  access_log: list | None = None,
                  progress: Callable[[dict], None] | None = None) -> tuple[ModelBundle, list[dict]]:
    """Train one bundle on one cluster's unpaired images.

    Each unit draws a fresh batch from each domain; the shorter domain is
    recycled. Checkpoints go to ``<checkpoint_dir>/cluster_<k>/`` after
    every epoch (``latest``) and at the end (``final``).
    """
    if len(data_x) == 0 or len(data_y) == 0:
        raise TrainingError(
            f"cluster {cluster_id} has an empty domain subset; repair it with the "
            "nearest-cluster fallback from clustering.partition_dataset"
        )
    seed = cfg.seed + cluster_id
    bundle = build_bundle(gcfg, dcfg, seed, cluster_id, cfg)
    rng = np.random.default_rng(seed + 1_000_003)
    sx, sy = _Stream(len(data_x), rng), _Stream(len(data_y), rng)
    per_epoch = units_per_epoch(len(data_x), len(data_y), cfg.batch_size)
    total = per_epoch * cfg.epochs
    history: list[dict] = []
    out_dir = Path(cfg.checkpoint_dir) / f"cluster_{cluster_id}" if cfg.checkpoint_dir else None
    bs = cfg.batch_size
    with dc.deterministic(cfg.deterministic):
        for epoch in range(cfg.epochs):
            for _ in range(per_epoch):
                ix, iy = sx.take(bs), sy.take(bs)
                negatives = None
                if unit_kind(bundle.unit_index, cfg.g_steps_per_d_step) == "D":
                    nx = rng.integers(len(data_x), size=bs)
                    ny = rng.integers(len(data_y), size=bs)
                    negatives = (data_x.images[nx], data_y.images[ny])
                    if access_log is not None:
                        access_log.extend((cluster_id, "x", data_x.ids[i]) for i in nx)
                        access_log.extend((cluster_id, "y", data_y.ids[i]) for i in ny)
                if access_log is not None:
                    access_log.extend((cluster_id, "x", data_x.ids[i]) for i in ix)
                    access_log.extend((cluster_id, "y", data_y.ids[i]) for i in iy)
                lr = cfg.learning_rate
                if cfg.lr_decay:
                    lr = cfg.learning_rate * min(1.0, 2.0 * (1.0 - bundle.unit_index / total))
                row = train_step(bundle, data_x.images[ix], data_y.images[iy], negatives, cfg, lr)
                history.append(row)
                if progress is not None:
                    progress(row)
            if out_dir is not None:
                save_checkpoint(bundle, out_dir / "latest")
                write_history(history, out_dir / "history.csv")
            log.info("cluster %d epoch %d/%d done", cluster_id, epoch + 1, cfg.epochs)
    if out_dir is not None:
        save_checkpoint(bundle, out_dir / "final")
        write_history(history, out_dir / "history.csv")
    return bundle, history


def train_all(data_x: Dataset, data_y: Dataset, index: ClusterIndex, gcfg: GeneratorConfig,
              dcfg: DiscriminatorConfig, cfg: TrainConfig = TrainConfig(),
              partition: Partition | None = None, workers: int = 1,
              access_log: list | None = None) -> list[tuple[ModelBundle, list[dict]]]:
    """One independent training per cluster; cluster k is seeded with ``seed + k``."""
    if partition is None:
        partition = partition_dataset(data_x.images, data_y.images, index, data_x.ids, data_y.ids)

    def run(k: int):
        try:
            return train_cluster(
                data_x.subset(partition.x_train[k]), data_y.subset(partition.y_train[k]),
                gcfg, dcfg, cfg, cluster_id=k, access_log=access_log,
            )
        except Exception as exc:
            raise TrainingError(f"cluster {k}: {exc}") from exc

    if workers <= 1:
        return [run(k) for k in range(index.K)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(index.K)))


# ------------------------------------------------------------------ persistence

def write_history(history: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in HISTORY_FIELDS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def read_history(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"unit_index": int(r["unit_index"]), "unit_kind": r["unit_kind"]}
            for k in HISTORY_FIELDS[2:]:
                row[k] = float(r[k]) if r[k] else float("nan")
            rows.append(row)
    return rows


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _records(bundle: ModelBundle) -> Iterator[tuple[str, np.ndarray]]:
    for net_name, net in bundle.networks().items():
        for pname, v in net.params.items():
            yield f"{net_name}.{pname}", v.data
    for net_name in NETWORKS:
        opt = bundle.optimizers[net_name]
        for pname in bundle.networks()[net_name].params:
            yield f"opt.{net_name}.m.{pname}", opt.m[pname]
            yield f"opt.{net_name}.v.{pname}", opt.v[pname]


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Write ``manifest.json`` plus ``params.bin`` (little-endian float32, manifest order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records, chunks = [], []
    for name, arr in _records(bundle):
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32 only, got {arr.dtype}")
        records.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    config = bundle.config()
    manifest = {
        "model": MODEL_NAME,
        "cluster_id": bundle.cluster_id,
        "config": config,
        "config_hash": config_hash(config),
        "unit_index": bundle.unit_index,
        "optimizer_steps": {k: bundle.optimizers[k].t for k in NETWORKS},
        "optimizer_hparams": {
            k: {"lr": bundle.optimizers[k].lr, "betas": list(bundle.optimizers[k].betas), "eps": bundle.optimizers[k].eps}
            for k in NETWORKS
        },
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "parameters": records,
    }
    (path / "params.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, expected_config: dict | None = None) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    if manifest.get("model") != MODEL_NAME:
        raise CheckpointError(f"{path}: not an {MODEL_NAME} checkpoint")
    config = manifest["config"]
    if config_hash(config) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: manifest config hash mismatch")
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written for a different configuration")
    expected = sum(4 * int(np.prod(r["shape"])) for r in manifest["parameters"])
    if len(payload) != expected or len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: corrupt payload, {len(payload)} bytes on disk but manifest describes {expected}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    gcfg = GeneratorConfig(**config["generator"])
    dcfg = DiscriminatorConfig(**config["discriminator"])
    bundle = build_bundle(gcfg, dcfg, 0, manifest["cluster_id"])
    targets = dict(_records(bundle))
    if [r["name"] for r in manifest["parameters"]] != list(targets):
        raise CheckpointError(f"{path}: parameter inventory does not match the configured networks")
    offset = 0
    for rec in manifest["parameters"]:
        n = int(np.prod(rec["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(rec["shape"])
        dst = targets[rec["name"]]
        if dst.shape != arr.shape:
            raise CheckpointError(f"{path}: {rec['name']} has shape {arr.shape}, expected {dst.shape}")
        dst[...] = arr
        offset += 4 * n
    for k in NETWORKS:
        opt = bundle.optimizers[k]
        opt.t = int(manifest["optimizer_steps"][k])
        hp = manifest["optimizer_hparams"][k]
        opt.lr, opt.betas, opt.eps = hp["lr"], tuple(hp["betas"]), hp["eps"]
    bundle.unit_index = int(manifest["unit_index"])
    return bundle
