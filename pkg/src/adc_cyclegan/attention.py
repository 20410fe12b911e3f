"""Convolutional block attention (channel gate followed by spatial gate)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Variable

SPATIAL_KERNEL = 7


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP applied to both pooled channel descriptors."""

    w0: Variable  # (C/r, C)
    b0: Variable  # (C/r,)
    w1: Variable  # (C, C/r)
    b1: Variable  # (C,)
    r: int

    @classmethod
    def init(cls, channels: int, r: int = 8, rng=None, std: float = 0.02, dtype=np.float32):
        if r < 1 or channels % r != 0:
            raise ValueError(f"channel count {channels} is not divisible by reduction ratio {r}")
        rng = np.random.default_rng() if rng is None else rng
        hidden = channels // r

        def gauss(*shape):
            return Variable((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)

        def zeros(n):
            return Variable(np.zeros(n, dtype=dtype), requires_grad=True)

        return cls(gauss(hidden, channels), zeros(hidden), gauss(channels, hidden), zeros(channels), r)

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    def named(self, prefix: str) -> dict[str, Variable]:
        return {f"{prefix}.w0": self.w0, f"{prefix}.b0": self.b0, f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1}


@dataclass
class SpatialAttentionParams:
    weight: Variable  # (1, 2, 7, 7)
    bias: Variable  # (1,)

    @classmethod
    def init(cls, rng=None, std: float = 0.02, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        k = SPATIAL_KERNEL
        w = (rng.standard_normal((1, 2, k, k)) * std).astype(dtype)
        return cls(Variable(w, requires_grad=True), Variable(np.zeros(1, dtype=dtype), requires_grad=True))

    def named(self, prefix: str) -> dict[str, Variable]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def _shared_mlp(desc: Variable, p: ChannelAttentionParams) -> Variable:
    n, c = desc.shape[:2]
    flat = dc.reshape(desc, (n, c))
    hidden = dc.relu(dc.linear(flat, p.w0, p.b0))
    return dc.linear(hidden, p.w1, p.b1)


def channel_attention(f: Variable, p: ChannelAttentionParams) -> Variable:
    """Channel gate Mc of shape N×C×1×1, values in (0, 1)."""
    n, c = f.shape[:2]
    if c != p.channels:
        raise ValueError(f"feature map has {c} channels, attention params expect {p.channels}")
    avg = _shared_mlp(dc.pool_spatial(f, "avg"), p)
    mx = _shared_mlp(dc.pool_spatial(f, "max"), p)
    return dc.reshape(dc.sigmoid(avg + mx), (n, c, 1, 1))


def spatial_attention(f: Variable, p: SpatialAttentionParams) -> Variable:
    """Spatial gate Ms of shape N×1×H×W, values in (0, 1)."""
    desc = dc.concat([dc.pool_channel(f, "avg"), dc.pool_channel(f, "max")], axis=1)
    pad = SPATIAL_KERNEL // 2
    return dc.sigmoid(dc.conv2d(desc, p.weight, p.bias, stride=1, padding=pad))


def cbam(f: Variable, cp: ChannelAttentionParams, sp: SpatialAttentionParams) -> Variable:
    refined = f * channel_attention(f, cp)
    return refined * spatial_attention(refined, sp)
