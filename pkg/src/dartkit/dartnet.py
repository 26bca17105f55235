"""DART dual-decoder network, its building blocks, and a single-decoder U-Net."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from .tensorcore import ops
from .tensorcore.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, ModuleList
from .tensorcore.tensor import Tensor, as_tensor


@dataclass(frozen=True)
class DartConfig:
    in_channels: int = 4
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_width: int = 512
    attention_level: int = 2
    attention_reduction: int = 8
    width_scale: Fraction = Fraction(1)

    def __post_init__(self):
        w = self.widths
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError(f"encoder widths must be strictly increasing, got {w}")
        if self.bottleneck != 2 * w[-1]:
            raise ValueError("bottleneck width must be twice the last encoder width")
        if not 1 <= self.attention_level <= len(w):
            raise ValueError(f"attention_level must be in 1..{len(w)}")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(int(Fraction(c) * Fraction(self.width_scale)) for c in self.encoder_widths)

    @property
    def bottleneck(self) -> int:
        return int(Fraction(self.bottleneck_width) * Fraction(self.width_scale))

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)


FULL_CONFIG = DartConfig()
DESK_CONFIG = DartConfig(width_scale=Fraction(1, 4))


class DartOutputs(NamedTuple):
    final: Tensor
    continuity: Tensor
    extreme: Tensor


class ResBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus (projected) identity, then ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, project: bool = False):
        super().__init__()
        if c_in <= 0 or c_out <= 0:
            raise ValueError("channel counts must be positive")
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        if c_in != c_out or project:
            self.proj = Conv2d(c_in, c_out, 1, rng, bias=False)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ops.relu(ops.add(h, skip))


class SimplifiedAttention(Module):
    """Squeeze-excitation channel gate: GAP -> 1x1 -> ReLU -> 1x1 -> sigmoid -> rescale."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels ({channels}) must be divisible by reduction ({reduction})")
        hidden = channels // reduction
        self.fc1 = Conv2d(channels, hidden, 1, rng, bias=True)
        self.fc2 = Conv2d(hidden, channels, 1, rng, bias=True)

    def gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SpatialAttention(Module):
    """7x7 conv over the channel-wise mean and max maps, sigmoid gate."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(axis=1, keepdims=True)
        mx = _channel_max(x)
        gate = ops.sigmoid(self.conv(ops.concat_channels(avg, mx)))
        return x * gate


def _channel_max(x: Tensor) -> Tensor:
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=1)
        return ((x, dx),)

    return Tensor._make(out, (x,), "channel_max", backward)


class ChannelSpatialAttention(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8):
        super().__init__()
        self.channel = SimplifiedAttention(channels, rng, reduction)
        self.spatial = SpatialAttention(rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


class DecoderBlock(Module):
    """2x2/2 transpose conv, concat with the encoder skip, ResBlock."""

    def __init__(self, c_deep: int, c_skip: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.up = ConvTranspose2d(c_deep, c_out, 2, rng, stride=2)
        self.res = ResBlock(c_out + c_skip, c_out, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        u = self.up(x)
        if u.shape[-2:] != skip.shape[-2:]:
            raise ops.ShapeError(f"skip spatial dims {skip.shape[-2:]} != upsampled {u.shape[-2:]}")
        return self.res(ops.concat_channels(u, skip))


class Encoder(Module):
    def __init__(self, cfg: DartConfig, rng: np.random.Generator):
        super().__init__()
        widths = cfg.widths
        # raw predictors are never added to features unprojected, whatever the channel count
        self.levels = ModuleList(
            ResBlock(c_in, c_out, rng, project=(i == 0))
            for i, (c_in, c_out) in enumerate(zip((cfg.in_channels,) + widths[:-1], widths)))

    def forward(self, x: Tensor):
        skips = []
        h = x
        for i, block in enumerate(self.levels):
            h = block(h)
            skips.append(h)
            h = ops.maxpool2x2(h)
        return h, skips


class Decoder(Module):
    def __init__(self, cfg: DartConfig, rng: np.random.Generator, attention_at: Optional[int] = None):
        super().__init__()
        widths = cfg.widths
        deep = (cfg.bottleneck,) + widths[::-1][:-1]
        self.blocks = ModuleList(
            DecoderBlock(d, s, s, rng) for d, s in zip(deep, widths[::-1]))
        self.attention_at = attention_at
        if attention_at is not None:
            self.attention = SimplifiedAttention(widths[::-1][attention_at - 1], rng, cfg.attention_reduction)
        self.head = Conv2d(widths[0], 1, 1, rng, bias=True)

    def forward(self, h: Tensor, skips) -> Tensor:
        for level, block in enumerate(self.blocks, start=1):
            h = block(h, skips[-level])
            if level == self.attention_at:
                h = self.attention(h)
        return self.head(h)


def _check_input(x: Tensor, cfg: DartConfig) -> None:
    h, w = x.shape[-2:]
    m = 2 ** cfg.depth
    if h % m or w % m:
        raise ops.ShapeError(f"spatial dims {h}×{w} must be divisible by {m}")
    if x.shape[-3] != cfg.in_channels:
        raise ops.ShapeError(f"input channels: expected {cfg.in_channels}, got {x.shape[-3]}")


def _squeeze_head(y: Tensor) -> Tensor:
    # (N,1,H,W) -> (N,H,W); (1,H,W) -> (H,W)
    return y.reshape(y.shape[:-3] + y.shape[-2:])


class Dart(Module):
    """Shared encoder, ResBlock bottleneck, continuity and extreme decoders."""

    def __init__(self, cfg: DartConfig, rng: np.random.Generator):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.bottleneck = ResBlock(cfg.widths[-1], cfg.bottleneck, rng)
        self.continuity = Decoder(cfg, rng)
        self.extreme = Decoder(cfg, rng, attention_at=cfg.attention_level)

    def forward(self, x) -> DartOutputs:
        x = as_tensor(x)
        _check_input(x, self.config)
        h, skips = self.encoder(x)
        h = self.bottleneck(h)
        cont = _squeeze_head(self.continuity(h, skips))
        ext = _squeeze_head(self.extreme(h, skips))
        return DartOutputs(cont + ext, cont, ext)


class SingleDecoderUNet(Module):
    """Same encoder/bottleneck, bottleneck channel+spatial attention, one decoder."""

    def __init__(self, cfg: DartConfig, rng: np.random.Generator, attention: bool = True):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.bottleneck = ResBlock(cfg.widths[-1], cfg.bottleneck, rng)
        self.attention = ChannelSpatialAttention(cfg.bottleneck, rng, cfg.attention_reduction) if attention else None
        self.decoder = Decoder(cfg, rng)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        _check_input(x, self.config)
        h, skips = self.encoder(x)
        h = self.bottleneck(h)
        if self.attention is not None:
            h = self.attention(h)
        return _squeeze_head(self.decoder(h, skips))


def build_resblock(c_in: int, c_out: int, seed: int = 0) -> ResBlock:
    return ResBlock(c_in, c_out, np.random.default_rng(seed))


def build_simplified_attention(channels: int, reduction: int = 8, seed: int = 0) -> SimplifiedAttention:
    return SimplifiedAttention(channels, np.random.default_rng(seed), reduction)


def build_decoder_block(c_in_deep: int, c_skip: int, c_out: int, seed: int = 0) -> DecoderBlock:
    return DecoderBlock(c_in_deep, c_skip, c_out, np.random.default_rng(seed))


def build_dart(cfg: DartConfig = FULL_CONFIG, seed: int = 0) -> Dart:
    return Dart(cfg, np.random.default_rng(seed))


def build_single_decoder_unet(cfg: DartConfig = FULL_CONFIG, seed: int = 0) -> SingleDecoderUNet:
    return SingleDecoderUNet(cfg, np.random.default_rng(seed))


def parameter_breakdown(model: Module) -> Dict[str, int]:
    """Parameter count per top-level component, plus ``total``."""
    out: Dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".")[0]
        if isinstance(model, Dart) and key in ("continuity", "extreme"):
            part = name.split(".")[1]
            key = f"{key}.{'head' if part == 'head' else 'attention' if part == 'attention' else 'decoder'}"
        out[key] = out.get(key, 0) + p.data.size
    out["total"] = sum(out.values())
    return out


def resblock_param_count(c_in: int, c_out: int) -> int:
    """Closed form: two 3x3 convs, optional 1x1 projection, BN affine pairs."""
    n = 9 * c_in * c_out + 9 * c_out * c_out + 2 * 2 * c_out
    if c_in != c_out:
        n += c_in * c_out + 2 * c_out
    return n
