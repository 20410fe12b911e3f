"""PNG ingestion, deterministic splits and the bundled toy dataset."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .trainer import Dataset


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    domain_x: str
    domain_y: str
    pairs: str = ""  # read only by evaluation
    split_seed: int = 0
    train_fraction: float = 0.9
    image_size: int = 64
    center_crop: float = 1.0


@dataclass
class Splits:
    train_x: Dataset
    train_y: Dataset
    test_x: Dataset
    test_y: Dataset


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """8-bit values to [-1, 1] via v / 127.5 - 1."""
    return np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[-1, 1] values to rounded 8-bit pixels."""
    v = (np.asarray(images, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def read_png(path: str | Path) -> np.ndarray:
    """8-bit grayscale PNG as an H×W uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.format != "PNG":
                raise DataError(f"{path}: not a PNG file")
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale (mode L), got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PNG")


def center_crop(img: np.ndarray, fraction: float) -> np.ndarray:
    if fraction >= 1.0:
        return img
    if not 0 < fraction:
        raise DataError("center_crop fraction must be in (0, 1]")
    h, w = img.shape
    ch, cw = max(1, round(h * fraction)), max(1, round(w * fraction))
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[top:top + ch, left:left + cw]


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape == (side, side):
        return img.copy()
    return np.asarray(Image.fromarray(img, mode="F").resize((side, side), Image.BILINEAR), dtype=np.float32)


def load_image(path: str | Path, side: int, crop: float = 1.0) -> np.ndarray:
    """Decode, rescale to [-1, 1], crop and resize; returns side×side float32."""
    return resize_bilinear(center_crop(to_unit_range(read_png(path)), crop), side)


def list_pngs(directory: str | Path) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    return sorted(p.relative_to(d).as_posix() for p in d.rglob("*.png"))


def load_domain(directory: str | Path, side: int, crop: float = 1.0,
                ids: Sequence[str] | None = None) -> Dataset:
    ids = list_pngs(directory) if ids is None else list(ids)
    if not ids:
        raise DataError(f"{directory}: domain has no PNG images")
    imgs = np.stack([load_image(Path(directory) / i, side, crop) for i in ids])[:, None]
    return Dataset(imgs, ids)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic permutation split; the train part holds round(n * fraction) items."""
    if not 0 < train_fraction <= 1:
        raise DataError("train_fraction must be in (0, 1]")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def ingest(m: DatasetManifest) -> Splits:
    """Load both domains and split each with the same seed.

    Domains are split independently by their own sorted file lists, so
    training never consults the pairing map. When both directories hold
    the same ids the two splits coincide.
    """
    dx = load_domain(m.domain_x, m.image_size, m.center_crop)
    dy = load_domain(m.domain_y, m.image_size, m.center_crop)
    trx, tex = split_indices(len(dx), m.train_fraction, m.split_seed)
    tr_y, te_y = split_indices(len(dy), m.train_fraction, m.split_seed)
    return Splits(dx.subset(trx), dy.subset(tr_y), dx.subset(tex), dy.subset(te_y))


def read_pairing_map(path: str | Path) -> dict[str, str]:
    """CSV with header ``x_id,y_id``; used by evaluation only."""
    path = Path(path)
    if not path.is_file():
        raise DataError(
            f"pairing map {path} not found: evaluation needs paired ground truth "
            "(training itself never uses pairs)"
        )
    with open(path, newline="") as fh:
        return {row["x_id"]: row["y_id"] for row in csv.DictReader(fh)}


# ------------------------------------------------------------------ toy data

_SUPERSAMPLE = 4


def tone_curve(u: np.ndarray) -> np.ndarray:
    """Smooth monotone S-curve on [0, 1] with a fixed point at 0.5."""
    return 0.5 - 0.5 * np.cos(np.pi * np.clip(u, 0.0, 1.0))


def _ellipse(draw, cx, cy, rx, ry, fill):
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=fill)


def _polygon(draw, rng, cx, cy, r, fill):
    k = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, k))
    radii = r * rng.uniform(0.6, 1.0, k)
    pts = [(float(cx + rr * np.cos(a)), float(cy + rr * np.sin(a))) for a, rr in zip(angles, radii)]
    draw.polygon(pts, fill=fill)


def render_scene(rng: np.random.Generator, side: int = 64, large: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """One toy scene in both domains, values in [0, 1].

    A body ellipse (large or small) on a dark background carries a few
    bright polygons/ellipses. The Y rendering inverts the body content
    and passes it through :func:`tone_curve`; the background stays dark
    in both domains.
    """
    s = side * _SUPERSAMPLE
    mask = Image.new("L", (s, s), 0)
    inner = Image.new("L", (s, s), 0)
    dm, di = ImageDraw.Draw(mask), ImageDraw.Draw(inner)
    cx = s / 2 + rng.uniform(-0.05, 0.05) * s
    cy = s / 2 + rng.uniform(-0.05, 0.05) * s
    scale = rng.uniform(0.40, 0.46) if large else rng.uniform(0.16, 0.22)
    rx = scale * s * rng.uniform(0.85, 1.0)
    ry = scale * s * rng.uniform(0.85, 1.0)
    _ellipse(dm, cx, cy, rx, ry, 255)
    body = int(rng.uniform(0.42, 0.58) * 255)
    _ellipse(di, cx, cy, rx, ry, body)
    for _ in range(int(rng.integers(2, 5))):
        ang, dist = rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 0.55)
        px, py = cx + dist * rx * np.cos(ang), cy + dist * ry * np.sin(ang)
        r = min(rx, ry) * rng.uniform(0.15, 0.32)
        fill = int(rng.uniform(0.8, 1.0) * 255)
        if rng.random() < 0.5:
            _ellipse(di, px, py, r, r * rng.uniform(0.6, 1.0), fill)
        else:
            _polygon(di, rng, px, py, r, fill)
    m = np.asarray(mask, dtype=np.float64) / 255.0
    v = np.asarray(inner, dtype=np.float64) / 255.0
    x_hr = m * v
    y_hr = m * tone_curve(1.0 - v)

    def down(a):
        return a.reshape(side, _SUPERSAMPLE, side, _SUPERSAMPLE).mean(axis=(1, 3))

    return down(x_hr), down(y_hr)


def make_toy_data(out: str | Path, n: int = 200, seed: int = 0, side: int = 64) -> dict:
    """Write ``X/``, ``Y/`` and ``pairs.csv`` under ``out``.

    Half of the scenes use a large body, half a small one (alternating by
    index), giving two sub-populations for clustering. Returns
    ``{"large": [...ids], "small": [...ids]}``.
    """
    out = Path(out)
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {"large": [], "small": []}
    width = max(4, int(math.log10(max(n, 1))) + 1)
    with_pairs = []
    for i in range(n):
        large = i % 2 == 0
        x, y = render_scene(rng, side, large)
        name = f"{i:0{width}d}.png"
        write_png(out / "X" / name, np.clip(np.rint(x * 255), 0, 255))
        write_png(out / "Y" / name, np.clip(np.rint(y * 255), 0, 255))
        groups["large" if large else "small"].append(name)
        with_pairs.append((name, name))
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_id", "y_id"])
        w.writerows(with_pairs)
    with open(out / "groups.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "group"])
        for g, names in groups.items():
            w.writerows((nm, g) for nm in names)
    return groups
