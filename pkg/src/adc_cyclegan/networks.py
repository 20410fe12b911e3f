"""Generator and patch discriminator networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .attention import ChannelAttentionParams, SpatialAttentionParams, cbam
from .diffcore import Variable

INIT_STD = 0.02
IN_EPS = 1e-5
LRELU_SLOPE = 0.2
DISC_STAGES = 4


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_width: int = 16
    n_res: int = 4
    image_size: int = 64
    use_cbam: bool = True
    reduction_ratio: int = 8
    init_std: float = INIT_STD
    norm_eps: float = IN_EPS

    def __post_init__(self):
        if self.n_res < 2:
            raise ValueError("n_res must be >= 2")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.use_cbam and (4 * self.base_width) % self.reduction_ratio:
            raise ValueError(
                f"residual width {4 * self.base_width} not divisible by reduction ratio {self.reduction_ratio}"
            )

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        return cls(base_width=64, n_res=9, image_size=256)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_width: int = 16
    image_size: int = 64
    n_layers: int = DISC_STAGES
    init_std: float = INIT_STD
    norm_eps: float = IN_EPS
    lrelu_slope: float = LRELU_SLOPE

    def __post_init__(self):
        if self.image_size % (2 ** self.n_layers):
            raise ValueError(f"image_size must be divisible by {2 ** self.n_layers}")

    @property
    def output_side(self) -> int:
        return self.image_size // 2 ** self.n_layers

    @classmethod
    def full_scale(cls) -> "DiscriminatorConfig":
        return cls(base_width=64, image_size=256)


class Network:
    """Holds an ordered name -> Variable parameter inventory."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32, std: float = INIT_STD, eps: float = IN_EPS):
        self.params: dict[str, Variable] = {}
        self._rng = rng
        self._dtype = dtype
        self._std = std
        self._eps = eps

    def _add(self, name: str, arr: np.ndarray) -> Variable:
        v = Variable(arr.astype(self._dtype), requires_grad=True, name=name)
        self.params[name] = v
        return v

    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self._add(f"{name}.weight", self._rng.standard_normal((cout, cin, k, k)) * self._std)
        self._add(f"{name}.bias", np.zeros(cout))

    def _norm(self, name: str, c: int) -> None:
        self._add(f"{name}.scale", np.ones(c))
        self._add(f"{name}.offset", np.zeros(c))

    def conv(self, x: Variable, name: str, stride: int = 1, padding=0) -> Variable:
        p = self.params
        return dc.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)

    def norm(self, x: Variable, name: str) -> Variable:
        p = self.params
        return dc.instance_norm(x, p[f"{name}.scale"], p[f"{name}.offset"], self._eps)

    def parameters(self) -> list[Variable]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Variable]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for v in self.params.values():
            v.requires_grad = flag


class Generator(Network):
    """Stem, two downsamples, residual blocks (CBAM in all but the last), two upsamples, tanh output."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__(np.random.default_rng() if rng is None else rng, dtype, cfg.init_std, cfg.norm_eps)
        self.cfg = cfg
        w, cin = cfg.base_width, cfg.in_channels
        self._conv("stem.conv", cin, w, 7)
        self._norm("stem.norm", w)
        self._conv("down1.conv", w, 2 * w, 3)
        self._norm("down1.norm", 2 * w)
        self._conv("down2.conv", 2 * w, 4 * w, 3)
        self._norm("down2.norm", 4 * w)
        self.attention: dict[int, tuple[ChannelAttentionParams, SpatialAttentionParams]] = {}
        for i in range(cfg.n_res):
            self._conv(f"res{i}.conv1", 4 * w, 4 * w, 3)
            self._norm(f"res{i}.norm1", 4 * w)
            self._conv(f"res{i}.conv2", 4 * w, 4 * w, 3)
            self._norm(f"res{i}.norm2", 4 * w)
            if cfg.use_cbam and i < cfg.n_res - 1:
                cp = ChannelAttentionParams.init(4 * w, cfg.reduction_ratio, self._rng, self._std, dtype)
                sp = SpatialAttentionParams.init(self._rng, self._std, dtype)
                for name, v in {**cp.named(f"res{i}.cbam.channel"), **sp.named(f"res{i}.cbam.spatial")}.items():
                    v.name = name
                    self.params[name] = v
                self.attention[i] = (cp, sp)
        self._conv("up1.conv", 4 * w, 2 * w, 3)
        self._norm("up1.norm", 2 * w)
        self._conv("up2.conv", 2 * w, w, 3)
        self._norm("up2.norm", w)
        self._conv("out.conv", w, cin, 7)

    def residual_block(self, x: Variable, i: int) -> Variable:
        h = dc.relu(self.norm(self.conv(x, f"res{i}.conv1", padding=1), f"res{i}.norm1"))
        h = self.norm(self.conv(h, f"res{i}.conv2", padding=1), f"res{i}.norm2")
        if i in self.attention:
            h = cbam(h, *self.attention[i])
        return x + h

    def __call__(self, x: Variable) -> Variable:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"generator expects N×{expected[0]}×{expected[1]}×{expected[2]}, got {x.shape}")
        h = dc.relu(self.norm(self.conv(x, "stem.conv", padding=3), "stem.norm"))
        h = dc.relu(self.norm(self.conv(h, "down1.conv", stride=2, padding=1), "down1.norm"))
        h = dc.relu(self.norm(self.conv(h, "down2.conv", stride=2, padding=1), "down2.norm"))
        for i in range(cfg.n_res):
            h = self.residual_block(h, i)
        h = dc.upsample_nearest(h, 2)
        h = dc.relu(self.norm(self.conv(h, "up1.conv", padding=1), "up1.norm"))
        h = dc.upsample_nearest(h, 2)
        h = dc.relu(self.norm(self.conv(h, "up2.conv", padding=1), "up2.norm"))
        return dc.tanh(self.conv(h, "out.conv", padding=3))

    def cbam_blocks(self) -> list[int]:
        return sorted({int(k.split(".")[0][3:]) for k in self.params if ".cbam." in k})


class Discriminator(Network):
    """Patch discriminator: 4×4 stride-2 stages then a stride-1 4×4 probability head.

    With four stride-2 stages and a 4×4 head each output cell sees a
    94×94 input patch.
    """

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__(np.random.default_rng() if rng is None else rng, dtype, cfg.init_std, cfg.norm_eps)
        self.cfg = cfg
        w = cfg.base_width
        chans = [cfg.in_channels] + [w * 2 ** i for i in range(cfg.n_layers)]
        for i in range(cfg.n_layers):
            self._conv(f"stage{i}.conv", chans[i], chans[i + 1], 4)
            if i > 0:
                self._norm(f"stage{i}.norm", chans[i + 1])
        self._conv("head.conv", chans[-1], 1, 4)

    def __call__(self, img: Variable) -> Variable:
        cfg = self.cfg
        if img.ndim != 4 or img.shape[1] != cfg.in_channels:
            raise ValueError(f"discriminator expects N×{cfg.in_channels}×H×W, got {img.shape}")
        side = 2 ** cfg.n_layers
        if img.shape[2] % side or img.shape[3] % side:
            raise ValueError(f"spatial size {img.shape[2:]} is not divisible by {side}")
        h = img
        for i in range(cfg.n_layers):
            h = self.conv(h, f"stage{i}.conv", stride=2, padding=1)
            if i > 0:
                h = self.norm(h, f"stage{i}.norm")
            h = dc.leaky_relu(h, cfg.lrelu_slope)
        # 'same' padding for an even kernel: one row/col before, two after
        return dc.sigmoid(self.conv(h, "head.conv", stride=1, padding=(1, 2, 1, 2)))


def receptive_field(n_layers: int = DISC_STAGES, kernel: int = 4) -> int:
    rf = kernel
    for _ in range(n_layers):
        rf = (rf - 1) * 2 + kernel
    return rf


def generator_forward(g: Generator, x: Variable) -> Variable:
    return g(x)


def discriminator_forward(d: Discriminator, img: Variable) -> Variable:
    return d(img)


def config_dict(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig) -> dict:
    return {"generator": asdict(gcfg), "discriminator": asdict(dcfg)}
