"""Feature extraction, K-means fitting and nearest-centroid routing."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_FEATURE_SIDE = 16


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureExtractorConfig:
    kind: str = "downsample_pixels"  # or "external_embeddings"
    side: int = DEFAULT_FEATURE_SIDE
    path: str = ""
    output_dim: int = DEFAULT_FEATURE_SIDE ** 2

    def __post_init__(self):
        if self.kind not in ("downsample_pixels", "external_embeddings"):
            raise ValueError(f"unknown feature extractor {self.kind!r}")
        if self.kind == "downsample_pixels" and self.output_dim != self.side ** 2:
            object.__setattr__(self, "output_dim", self.side ** 2)

    @classmethod
    def pixels(cls, side: int = DEFAULT_FEATURE_SIDE) -> "FeatureExtractorConfig":
        return cls("downsample_pixels", side=side, output_dim=side * side)

    @classmethod
    def embeddings(cls, path: str | Path, dim: int) -> "FeatureExtractorConfig":
        return cls("external_embeddings", side=0, path=str(path), output_dim=dim)


# ------------------------------------------------------------------ embeddings file
#
# Sequence of records, all little-endian:
#   uint32  id length in bytes
#   bytes   image id (UTF-8, relative path)
#   uint32  dimension D
#   float32 x D
#
# Every record in a file must share one D.

def write_embeddings(path: str | Path, embeddings: Mapping[str, np.ndarray]) -> None:
    dims = {np.asarray(v).size for v in embeddings.values()}
    if len(dims) > 1:
        raise ClusteringError(f"embeddings have mixed dimensions {sorted(dims)}")
    with open(path, "wb") as fh:
        for image_id, vec in embeddings.items():
            raw = image_id.encode("utf-8")
            vec = np.asarray(vec, dtype="<f4").reshape(-1)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", vec.size))
            fh.write(vec.tobytes())


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    out: dict[str, np.ndarray] = {}
    pos, dim = 0, None
    while pos < len(data):
        if pos + 4 > len(data):
            raise ClusteringError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        image_id = data[pos:pos + n].decode("utf-8")
        pos += n
        (d,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if dim is None:
            dim = d
        elif d != dim:
            raise ClusteringError(f"{path}: record {image_id!r} has dimension {d}, expected {dim}")
        if pos + 4 * d > len(data):
            raise ClusteringError(f"{path}: truncated vector for {image_id!r}")
        out[image_id] = np.frombuffer(data, dtype="<f4", count=d, offset=pos).astype(np.float64)
        pos += 4 * d
    return out


# ------------------------------------------------------------------ features

def _images_2d(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError("expected single-channel images")
        arr = arr[:, 0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected M×H×W images, got shape {arr.shape}")
    return arr


def block_mean_resize(img01: np.ndarray, side: int) -> np.ndarray:
    m, h, w = img01.shape
    if h % side or w % side:
        raise ValueError(f"image {h}x{w} is not divisible into a {side}x{side} grid")
    return img01.reshape(m, side, h // side, side, w // side).mean(axis=(2, 4))


def extract_features(images, cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                     ids: Sequence[str] | None = None,
                     embeddings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Feature matrix, one row per image. Images are expected in [-1, 1]."""
    if cfg.kind == "downsample_pixels":
        arr = (_images_2d(images) + 1.0) / 2.0
        return block_mean_resize(arr, cfg.side).reshape(arr.shape[0], -1)
    if ids is None:
        raise ClusteringError("external embeddings need image ids")
    table = embeddings if embeddings is not None else read_embeddings(cfg.path)
    rows = []
    for image_id in ids:
        if image_id not in table:
            raise ClusteringError(f"embeddings file has no vector for image id {image_id!r}")
        rows.append(np.asarray(table[image_id], dtype=np.float64))
    feats = np.stack(rows) if rows else np.zeros((0, cfg.output_dim))
    if feats.shape[1] != cfg.output_dim:
        raise ClusteringError(f"embeddings have dimension {feats.shape[1]}, config says {cfg.output_dim}")
    return feats


# ------------------------------------------------------------------ k-means

@dataclass(frozen=True)
class ClusterIndex:
    K: int
    centroids: np.ndarray
    extractor: FeatureExtractorConfig = FeatureExtractorConfig()
    fit_seed: int = 0
    labels: np.ndarray | None = field(default=None, compare=False, repr=False)
    inertia_history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "fit_seed": self.fit_seed,
            "extractor": {
                "kind": self.extractor.kind,
                "side": self.extractor.side,
                "path": self.extractor.path,
                "output_dim": self.extractor.output_dim,
            },
            "centroids": [[float(v) for v in row] for row in self.centroids],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClusterIndex":
        cents = np.array(d["centroids"], dtype=np.float64)
        return cls(int(d["K"]), cents, FeatureExtractorConfig(**d["extractor"]), int(d["fit_seed"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClusterIndex":
        return cls.from_dict(json.loads(Path(path).read_text()))


def squared_distances(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - centroids[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def inertia(features: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    d = features - centroids[labels]
    return float(np.einsum("md,md->", d, d))


def kmeans_plusplus(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = features.shape[0]
    first = int(rng.integers(m))
    centers = [features[first]]
    closest = squared_distances(features, features[first][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; fall back to an unused index
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=closest / total))
        centers.append(features[idx])
        closest = np.minimum(closest, squared_distances(features, features[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features, K: int = 4, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
               init: str = "k-means++",
               extractor: FeatureExtractorConfig = FeatureExtractorConfig()) -> ClusterIndex:
    """Lloyd iterations from k-means++ (or uniform random) seeding.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. An empty cluster is re-seeded at the point farthest from
    its assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError(f"features must be a 2-D matrix, got shape {x.shape}")
    m = x.shape[0]
    if K < 1:
        raise ClusteringError("K must be >= 1")
    if m < K:
        raise ClusteringError(f"cannot fit {K} clusters to {m} points")
    rng = np.random.default_rng(seed)
    if init == "k-means++":
        centroids = kmeans_plusplus(x, K, rng)
    elif init == "random":
        centroids = x[rng.choice(m, K, replace=False)].copy()
    else:
        raise ClusteringError(f"unknown init {init!r}")

    history: list[float] = []
    labels = np.zeros(m, dtype=np.int64)
    for _ in range(max_iter):
        dist = squared_distances(x, centroids)
        labels = dist.argmin(axis=1)
        energy = float(dist[np.arange(m), labels].sum())
        if history and energy > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"K-means objective increased: {history[-1]} -> {energy}")
        history.append(energy)
        new = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(axis=0)
        for k in range(K):
            if not (labels == k).any():
                own = dist[np.arange(m), labels]
                far = int(own.argmax())
                new[k] = x[far]
                labels[far] = k
                dist[far, :] = 0.0  # keep the same point from being picked twice
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    dist = squared_distances(x, centroids)
    labels = dist.argmin(axis=1)
    final = float(dist[np.arange(m), labels].sum())
    if final > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"K-means objective increased: {history[-1]} -> {final}")
    history.append(final)
    return ClusterIndex(K, centroids, extractor, seed, labels=labels, inertia_history=tuple(history))


def assign_clusters(features, index: ClusterIndex) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != index.centroids.shape[1]:
        raise ClusteringError(
            f"feature dimension {x.shape[1]} does not match centroid dimension {index.centroids.shape[1]}"
        )
    # argmin returns the first minimum, so ties go to the lowest cluster id
    return squared_distances(x, index.centroids).argmin(axis=1)


def assign_cluster(feature, index: ClusterIndex) -> int:
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 1:
        raise ClusteringError("assign_cluster takes a single feature vector")
    return int(assign_clusters(f[None], index)[0])


@dataclass
class Partition:
    """Per-cluster index lists into the X and Y datasets."""

    x: list[np.ndarray]
    y: list[np.ndarray]
    x_train: list[np.ndarray]  # after empty-cluster fallback
    y_train: list[np.ndarray]
    fallback: dict[tuple[int, str], int]  # (cluster, domain) -> donor cluster

    @property
    def K(self) -> int:
        return len(self.x)

    def counts(self) -> list[tuple[int, int, int]]:
        return [(k, len(self.x[k]), len(self.y[k])) for k in range(self.K)]

    def counts_table(self) -> str:
        lines = ["cluster,count_x,count_y,fallback"]
        for k, nx, ny in self.counts():
            notes = [f"{dom}<-{donor}" for (kk, dom), donor in sorted(self.fallback.items()) if kk == k]
            lines.append(f"{k},{nx},{ny},{';'.join(notes)}")
        return "\n".join(lines) + "\n"


def partition_by_labels(labels_x: np.ndarray, labels_y: np.ndarray, index: ClusterIndex) -> Partition:
    K = index.K
    xs = [np.flatnonzero(labels_x == k) for k in range(K)]
    ys = [np.flatnonzero(labels_y == k) for k in range(K)]
    if sum(len(v) for v in xs) == 0 or sum(len(v) for v in ys) == 0:
        raise ClusteringError("a domain has no images at all")
    cdist = squared_distances(index.centroids, index.centroids)
    fallback: dict[tuple[int, str], int] = {}
    x_train, y_train = list(xs), list(ys)
    for dom, parts, train in (("x", xs, x_train), ("y", ys, y_train)):
        for k in range(K):
            if len(parts[k]):
                continue
            order = np.argsort(cdist[k], kind="stable")
            donor = next(int(j) for j in order if len(parts[j]))
            train[k] = parts[donor]
            fallback[(k, dom)] = donor
    return Partition(xs, ys, x_train, y_train, fallback)


def partition_dataset(images_x, images_y, index: ClusterIndex,
                      ids_x: Sequence[str] | None = None, ids_y: Sequence[str] | None = None) -> Partition:
    """Route every image of both domains to one cluster.

    A cluster that is empty in one domain borrows that domain's images
    from the nearest cluster (by centroid distance) that has some; the
    substitution is recorded in ``Partition.fallback``.
    """
    fx = extract_features(images_x, index.extractor, ids_x)
    fy = extract_features(images_y, index.extractor, ids_y)
    return partition_by_labels(assign_clusters(fx, index), assign_clusters(fy, index), index)
