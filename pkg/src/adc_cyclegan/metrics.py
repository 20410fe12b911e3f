"""Image quality metrics on [0, 1] images and multi-run reporting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
PSNR_CAP = 100.0
METRIC_NAMES = ("mae", "psnr", "ssim")


@dataclass(frozen=True)
class ImagePair:
    reference: np.ndarray
    candidate: np.ndarray

    def __post_init__(self):
        ref = np.clip(np.asarray(self.reference, dtype=np.float64), 0.0, 1.0)
        cand = np.clip(np.asarray(self.candidate, dtype=np.float64), 0.0, 1.0)
        if ref.shape != cand.shape:
            raise ValueError(f"image shapes differ: {ref.shape} vs {cand.shape}")
        if ref.ndim != 2:
            raise ValueError(f"expected H×W images, got shape {ref.shape}")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "candidate", cand)


def _as_pair(a, b=None) -> ImagePair:
    if isinstance(a, ImagePair):
        return a
    return ImagePair(a, b)


def mae(reference, candidate=None) -> float:
    p = _as_pair(reference, candidate)
    return float(np.mean(np.abs(p.reference - p.candidate)))


def mse(reference, candidate=None) -> float:
    p = _as_pair(reference, candidate)
    d = p.reference - p.candidate
    return float(np.mean(d * d))


def psnr(reference, candidate=None, data_range: float = 1.0, literal: bool = False) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images.

    ``literal=True`` uses ``L / MSE`` in place of the usual ``L**2 / MSE``.
    """
    err = mse(reference, candidate)
    if err == 0.0:
        return PSNR_CAP
    peak = data_range if literal else data_range ** 2
    return min(PSNR_CAP, 10.0 * math.log10(peak / err))


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = sliding_window_view(img, k, axis=0) @ taps
    return sliding_window_view(rows, k, axis=1) @ taps


def ssim_map(reference, candidate=None, data_range: float = 1.0,
             window_size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    p = _as_pair(reference, candidate)
    h, w = p.reference.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} is smaller than the {window_size}x{window_size} SSIM window")
    taps = gaussian_window(window_size, sigma)
    x, y = p.reference, p.candidate
    mu_x, mu_y = _filter_valid(x, taps), _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x * mu_x
    var_y = _filter_valid(y * y, taps) - mu_y * mu_y
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    return _ssim_formula(mu_x, mu_y, var_x, var_y, cov, data_range)


def _ssim_formula(mu_x, mu_y, var_x, var_y, cov, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(reference, candidate=None, data_range: float = 1.0, mode: str = "window") -> float:
    """Structural similarity.

    ``mode="window"`` averages local SSIM over an 11×11 Gaussian window
    (sigma 1.5, valid region only). ``mode="global"`` evaluates the same
    formula once with whole-image statistics.
    """
    p = _as_pair(reference, candidate)
    if mode == "window":
        return float(ssim_map(p, data_range=data_range).mean())
    if mode == "global":
        x, y = p.reference, p.candidate
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return float(_ssim_formula(mx, my, vx, vy, cov, data_range))
    raise ValueError(f"unknown SSIM mode {mode!r}")


def evaluate_pair(reference, candidate=None, psnr_literal: bool = False, ssim_mode: str = "window") -> dict:
    p = _as_pair(reference, candidate)
    return {
        "mae": mae(p),
        "psnr": psnr(p, literal=psnr_literal),
        "ssim": ssim(p, mode=ssim_mode),
    }


def mean_metrics(rows: Iterable[Mapping[str, float]]) -> dict:
    rows = list(rows)
    if not rows:
        raise ValueError("no metric rows to average")
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}


@dataclass
class MetricsReport:
    runs: list[dict]
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)

    def cell(self, metric: str) -> str:
        return f"{self.mean[metric]:.5f} ({self.sd[metric]:.5f})"

    def to_dict(self) -> dict:
        out = {}
        for m in METRIC_NAMES:
            out[f"{m}_mean"] = self.mean[m]
            out[f"{m}_sd"] = self.sd[m]
        out["runs"] = self.runs
        return out

    def to_text(self, label: str = "") -> str:
        header = f"{'':<24}{'MAE':>22}{'PSNR':>24}{'SSIM':>22}"
        row = f"{label:<24}" + "".join(f"{self.cell(m):>{w}}" for m, w in zip(METRIC_NAMES, (22, 24, 22)))
        return header + "\n" + row + "\n"

    def write(self, stem: str | Path, label: str = "") -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".txt").write_text(self.to_text(label))
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def aggregate(runs: Sequence[Mapping[str, float]]) -> MetricsReport:
    """Mean and sample standard deviation (n-1) of each metric over runs."""
    runs = [dict(r) for r in runs]
    if not runs:
        raise ValueError("cannot aggregate an empty list of runs")
    report = MetricsReport(runs=runs)
    for m in METRIC_NAMES:
        vals = np.array([r[m] for r in runs], dtype=np.float64)
        report.mean[m] = float(vals.mean())
        report.sd[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return report


def render_table(rows: Sequence[tuple[str, MetricsReport]], title: str = "") -> str:
    """Several labelled reports as one plain-text table."""
    width = max([24] + [len(label) + 2 for label, _ in rows])
    lines = [title] if title else []
    lines.append(f"{'Method':<{width}}{'MAE':>22}{'PSNR':>24}{'SSIM':>22}")
    for label, rep in rows:
        lines.append(
            f"{label:<{width}}"
            + "".join(f"{rep.cell(m):>{w}}" for m, w in zip(METRIC_NAMES, (22, 24, 22)))
        )
    return "\n".join(lines) + "\n"
