"""DexiNed graph: six-block encoder, per-block upsamplers, fusion and averaged heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

VARIANTS = ("bdc", "dc", "sp")
SIDE_SCALES = (2, 4, 8, 16, 16, 16)
DECONV_INIT_NOISE = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # block 1 is a (first conv, second conv) pair; blocks 2-6 have one width
    block_channels: tuple = ((32, 64), 128, 256, 512, 512, 256)
    sub_blocks: tuple = (1, 1, 2, 3, 3, 3)
    variant: str = "dc"
    width_multiplier: float = 1.0
    pad_multiple: int = 16
    upsample_kernel: int = 2
    upsample_filters: int = 16
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.block_channels = tuple(tuple(b) if isinstance(b, (list, tuple)) else b for b in self.block_channels)
        self.sub_blocks = tuple(self.sub_blocks)
        if len(self.block_channels) != 6 or len(self.sub_blocks) != 6:
            raise ConfigError("exactly 6 main blocks are required")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        if any(n < 1 for n in self.sub_blocks):
            raise ConfigError("every block needs at least one sub-block")
        if self.upsample_kernel not in (2, 4):
            raise ConfigError("upsample_kernel must be 2 (s x s) or 4 (2s x 2s)")
        if self.pad_multiple % 16:
            raise ConfigError("pad_multiple must be a multiple of 16")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        for w in self.widths():
            if w < 1:
                raise ConfigError(f"width multiplier {self.width_multiplier} leaves a block with zero channels")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(width_multiplier=1 / 8, **overrides)

    def widths(self) -> list[int]:
        """Scaled channel widths: [block1 first conv, block1, block2, ..., block6]."""
        (a, b), *rest = self.block_channels
        return [int(round(c * self.width_multiplier)) for c in (a, b, *rest)]

    def side_channels(self) -> list[int]:
        return self.widths()[1:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = [list(b) if isinstance(b, tuple) else b for b in self.block_channels]
        d["sub_blocks"] = list(self.sub_blocks)
        return d


@dataclass(frozen=True)
class ScalePlan:
    """Upsampler stages for one side output: 'sub2' stages then one 'sub1'."""

    scale: int
    stages: tuple

    @property
    def n_sub2(self) -> int:
        return sum(s == "sub2" for s in self.stages)


def plan_upsampling(scale: int) -> ScalePlan:
    if not isinstance(scale, (int, np.integer)) or scale < 2 or scale & (scale - 1):
        raise ad.ArgumentError(f"scale must be a power of two >= 2, got {scale!r}")
    stages = []
    s = scale
    while s > 2:
        stages.append("sub2")
        s //= 2
    stages.append("sub1")
    return ScalePlan(int(scale), tuple(stages))


@dataclass
class EncoderGraph:
    config: ModelConfig
    params: ParameterStore
    plans: list = field(default_factory=list)
    bn_layers: list = field(default_factory=list)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def trainable(self):
        return self.params.trainable()

    def zero_grad(self) -> None:
        self.params.zero_grad()


@dataclass
class EdgeMapSet:
    sides: list          # six N x 1 x H x W logit tensors
    fused: Tensor        # N x 1 x H x W logits
    averaged: Tensor     # N x 1 x H x W probabilities

    @property
    def logits(self) -> list:
        """The supervised outputs in loss order: six sides then fused."""
        return [*self.sides, self.fused]

    def side_probs(self) -> list[np.ndarray]:
        return [_sigmoid(s.data) for s in self.sides]

    def fused_prob(self) -> np.ndarray:
        return _sigmoid(self.fused.data)

    def all_probs(self) -> dict[str, np.ndarray]:
        maps = {f"out{i + 1}": p for i, p in enumerate(self.side_probs())}
        maps["fused"] = self.fused_prob()
        maps["avg"] = self.averaged.data
        return maps


def _sigmoid(z):
    return ad.sigmoid(Tensor(z)).data


# ---------------------------------------------------------------------------
# construction

class _Builder:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        self.dtype = np.dtype(cfg.dtype)
        self.bn_layers: list[str] = []

    def conv(self, name, cin, cout, k, bias=True):
        std = math.sqrt(2.0 / (cin * k * k))
        self.store.add(f"{name}/kernel", (self.rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype))
        if bias:
            self.store.add(f"{name}/bias", np.zeros(cout, dtype=self.dtype))

    def bn(self, name, c):
        self.store.add(f"{name}/gamma", np.ones(c, dtype=self.dtype))
        self.store.add(f"{name}/beta", np.zeros(c, dtype=self.dtype))
        self.store.add(f"{name}/running_mean", np.zeros(c, dtype=self.dtype), trainable=False)
        self.store.add(f"{name}/running_var", np.ones(c, dtype=self.dtype), trainable=False)
        self.bn_layers.append(name)

    def conv_bn(self, prefix, cin, cout):
        """1x1 connection block: conv + batch-norm, no activation."""
        self.conv(f"{prefix}/conv", cin, cout, 1, bias=False)
        self.bn(f"{prefix}/bn", cout)

    def sub_block(self, prefix, cin, cout):
        self.conv(f"{prefix}/conv1", cin, cout, 3, bias=False)
        self.bn(f"{prefix}/bn1", cout)
        self.conv(f"{prefix}/conv2", cout, cout, 3, bias=False)
        self.bn(f"{prefix}/bn2", cout)

    def upsampler(self, idx, cin, plan: ScalePlan):
        cfg = self.cfg
        k = cfg.upsample_kernel
        for j, stage in enumerate(plan.stages):
            prefix = f"up{idx}/stage{j + 1}"
            f = cfg.upsample_filters if stage == "sub2" else 1
            self.conv(f"{prefix}/conv", cin, f, 1)
            if stage == "sub1":
                # Single ReLU channel: start with non-negative weights so it is
                # not dead on the non-negative maps coming out of a bdc stage.
                kern = self.store[f"{prefix}/conv/kernel"]
                kern.data = np.abs(kern.data)
            if cfg.variant == "sp":
                # ICNR: all r*r sub-pixel copies of a channel start equal, so
                # the shuffle begins as nearest-neighbour upsampling
                std = math.sqrt(2.0 / (f * 9))
                base = self.rng.standard_normal((f, f, 3, 3)) * std
                self.store.add(f"{prefix}/subpixel/kernel", np.repeat(base, 4, axis=0).astype(self.dtype))
                self.store.add(f"{prefix}/subpixel/bias", np.zeros(f * 4, dtype=self.dtype))
            elif cfg.variant == "bdc":
                self.store.add(f"{prefix}/deconv/kernel", ad.bilinear_kernel(k, f, 2).astype(self.dtype), trainable=False)
            else:
                # learnable, but starting at bilinear (plus a little noise);
                # random starts leave the 1-channel head dead after a few steps
                noise = self.rng.standard_normal((f, f, k, k)) * DECONV_INIT_NOISE
                self.store.add(f"{prefix}/deconv/kernel", (ad.bilinear_kernel(k, f, 2) + noise).astype(self.dtype))
                self.store.add(f"{prefix}/deconv/bias", np.zeros(f, dtype=self.dtype))
            cin = f


def build_model(config: ModelConfig | None = None, seed: int = 0) -> EncoderGraph:
    """Instantiate all parameters deterministically from ``seed``."""
    cfg = config or ModelConfig()
    b = _Builder(cfg, seed)
    w = cfg.widths()  # [b1a, b1, b2, b3, b4, b5, b6]
    c1a, c = w[0], w[1:]

    # block 1: strided conv pair
    b.conv("block1/sub1/conv1", 3, c1a, 3, bias=False)
    b.bn("block1/sub1/bn1", c1a)
    b.conv("block1/sub1/conv2", c1a, c[0], 3, bias=False)
    b.bn("block1/sub1/bn2", c[0])

    for blk in range(2, 7):
        cin = c[blk - 2]
        cout = c[blk - 1]
        for j in range(cfg.sub_blocks[blk - 1]):
            b.sub_block(f"block{blk}/sub{j + 1}", cin if j == 0 else cout, cout)
        if blk in (3, 4, 5):
            b.conv_bn(f"block{blk}/edge_proj", c[1], cout)
        elif blk == 6:
            b.conv_bn("block6/edge_proj", c[4], cout)
    # main-connections: transition into blocks 3..6
    for blk in range(2, 6):
        b.conv_bn(f"main{blk}", c[blk - 2], c[blk - 1])

    plans = [plan_upsampling(s) for s in SIDE_SCALES]
    for i, (ch, plan) in enumerate(zip(c, plans), start=1):
        b.upsampler(i, ch, plan)

    n_out = len(SIDE_SCALES) + 1
    b.store.add("fuse/kernel", np.full((1, n_out - 1, 1, 1), 1.0 / (n_out - 1), dtype=b.dtype))
    b.store.add("fuse/bias", np.zeros(1, dtype=b.dtype))
    return EncoderGraph(cfg, b.store, plans, b.bn_layers)


# ---------------------------------------------------------------------------
# forward

def _conv(g: EncoderGraph, x, name, stride=1):
    p = g.params
    bias = p[f"{name}/bias"] if f"{name}/bias" in p else None
    return ad.conv2d(x, p[f"{name}/kernel"], bias, stride=stride)


def _bn(g: EncoderGraph, x, name, training):
    p = g.params
    return ad.batch_norm(x, p[f"{name}/gamma"], p[f"{name}/beta"], p[f"{name}/running_mean"].data,
                         p[f"{name}/running_var"].data, training,
                         momentum=g.config.bn_momentum, epsilon=g.config.bn_epsilon)


def _conv_bn(g, x, prefix, training, stride=1):
    return _bn(g, _conv(g, x, f"{prefix}/conv", stride), f"{prefix}/bn", training)


def _sub_block(g, x, prefix, training, last, stride=1):
    h = ad.relu(_bn(g, _conv(g, x, f"{prefix}/conv1", stride), f"{prefix}/bn1", training))
    h = _bn(g, _conv(g, h, f"{prefix}/conv2"), f"{prefix}/bn2", training)
    return h if last else ad.relu(h)


def _pool_to(x: Tensor, times: int) -> Tensor:
    for _ in range(times):
        x = ad.max_pool(x)
    return x


def encoder_forward(graph: EncoderGraph, x: Tensor, training: bool = False) -> list[Tensor]:
    """Run the six main blocks; returns side features at scales 2, 4, 8, 16, 16, 16."""
    cfg = graph.config
    n_sub = cfg.sub_blocks
    sides = []

    b1 = _sub_block(graph, x, "block1/sub1", training, last=True, stride=2)
    sides.append(b1)
    block_in = ad.max_pool(b1)                                   # scale 4

    h = block_in
    for j in range(n_sub[1]):
        h = _sub_block(graph, h, f"block2/sub{j + 1}", training, last=j == n_sub[1] - 1)
    sides.append(h)
    edge = ad.max_pool(h)                                        # scale 8, feeds blocks 3-5
    block_in = ad.add(edge, _conv_bn(graph, block_in, "main2", training, stride=2))

    for blk in (3, 4, 5, 6):
        if blk == 6:
            proj = _conv_bn(graph, sides[4], "block6/edge_proj", training)
        else:
            proj = _conv_bn(graph, _pool_to(edge, 0 if blk == 3 else 1), f"block{blk}/edge_proj", training)
        h = block_in
        for j in range(n_sub[blk - 1]):
            h = _sub_block(graph, h, f"block{blk}/sub{j + 1}", training, last=j == n_sub[blk - 1] - 1)
            h = ad.average([h, proj])
        sides.append(h)
        if blk == 3:
            block_in = ad.add(ad.max_pool(h), _conv_bn(graph, block_in, "main3", training, stride=2))  # scale 16
        elif blk in (4, 5):
            block_in = ad.add(h, _conv_bn(graph, block_in, f"main{blk}", training))
    return sides


def _upsample(graph: EncoderGraph, x: Tensor, idx: int) -> Tensor:
    cfg = graph.config
    p = graph.params
    for j, stage in enumerate(graph.plans[idx - 1].stages):
        prefix = f"up{idx}/stage{j + 1}"
        x = ad.relu(_conv(graph, x, f"{prefix}/conv"))
        if cfg.variant == "sp":
            x = ad.pixel_shuffle(_conv(graph, x, f"{prefix}/subpixel"), 2)
        else:
            bias = p[f"{prefix}/deconv/bias"] if f"{prefix}/deconv/bias" in p else None
            x = ad.transpose_conv2d(x, p[f"{prefix}/deconv/kernel"], 2, bias)
    return x


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflection-pad H and W up to a multiple; returns the padded array and (top, left)."""
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    top, left = ph // 2, pw // 2
    pads = [(0, 0)] * (image.ndim - 2) + [(top, ph - top), (left, pw - left)]
    return np.pad(image, pads, mode="reflect" if min(h, w) > 1 else "edge"), (top, left)


def forward(graph: EncoderGraph, image, training: bool = False) -> EdgeMapSet:
    """Predict all edge maps for an N x 3 x H x W batch at input resolution."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ad.ShapeError(f"expected an N x 3 x H x W image batch, got {x.shape}")
    h, w = x.shape[2:]
    xp, (top, left) = pad_to_multiple(x.astype(graph.dtype, copy=False), graph.config.pad_multiple)
    feats = encoder_forward(graph, Tensor(xp), training)
    sides = []
    for i, f in enumerate(feats, start=1):
        up = _upsample(graph, f, i)
        sides.append(ad.crop(up, top, left, h, w))
    fused = _conv(graph, ad.concat(sides), "fuse")
    averaged = ad.average([ad.sigmoid(t) for t in (*sides, fused)])
    return EdgeMapSet(sides, fused, averaged)


def image_to_input(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """H x W x 3 uint8 (or [0,1] float) image -> 1 x 3 x H x W centred input."""
    arr = np.asarray(rgb)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return (arr.transpose(2, 0, 1)[None] - 0.5).astype(dtype)


def parameter_count(graph: EncoderGraph, trainable_only: bool = True) -> int:
    return sum(p.value.data.size for p in graph.params if p.trainable or not trainable_only)
