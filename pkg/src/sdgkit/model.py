"""Network pieces: stem, classification body, style decoder, resize, style plugins.

Two backbone kinds are available.  ``resnet18`` mirrors torchvision's ResNet-18
with the first conv/bn/relu split off as the stem and a single-logit head.
``small-cnn`` is a CPU-sized residual network for desk-scale experiments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .disentangle import ChannelGate, ProjectionHead

log = logging.getLogger(__name__)

BACKBONE_KINDS = ("small-cnn", "resnet18")
DECODER_RESOLUTIONS = (24, 48, 96)


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "resnet18"
    stem_channels: int = 64
    stem_stride: int = 2
    widths: tuple[int, ...] = (32, 48, 64)
    pretrained_weights_path: str = ""
    plugin_layers: tuple[int, ...] = (0, 1, 2)
    in_channels: int = 3

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "resnet18" and self.stem_channels != 64:
            raise ValueError("resnet18 stem has 64 channels")
        if any(i not in (0, 1, 2) for i in self.plugin_layers):
            raise ValueError("plugin insertion points must be among 0 (after stem), 1, 2")
        if self.kind == "small-cnn" and len(self.widths) != 3:
            raise ValueError("small-cnn needs exactly three block widths")


@dataclass(frozen=True)
class DecoderConfig:
    resolution: int = 48
    widths: tuple[int, ...] = (32,)

    def __post_init__(self):
        # experiment configs restrict r to DECODER_RESOLUTIONS; any positive size works here
        if self.resolution < 1:
            raise ValueError(f"decoder resolution must be positive, got {self.resolution}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("decoder widths must be positive")


@dataclass(frozen=True)
class StylePluginConfig:
    kind: str = "none"
    p: float = 0.5
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("plugin probability must be in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("plugin alpha must be positive")


# ---------------------------------------------------------------- resize

def resize(x: torch.Tensor, r: int) -> torch.Tensor:
    """Bilinear resize to ``r x r`` with half-pixel centres (no corner alignment)."""
    if r <= 0:
        raise ValueError(f"resize side must be positive, got {r}")
    if tuple(x.shape[-2:]) == (r, r):
        return x
    return F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------- style plugins

def _instance_stats(f: torch.Tensor, eps: float):
    mu = f.mean(dim=(2, 3), keepdim=True)
    sig = (f.var(dim=(2, 3), keepdim=True, unbiased=False) + eps).sqrt()
    return mu.detach(), sig.detach()


def mixstyle_apply(f, cfg: StylePluginConfig, rng: np.random.Generator | None, training: bool,
                   lam=None, perm=None, eps: float = 1e-6):
    """Mix per-instance channel statistics with a shuffled partner.

    ``lam`` (scalar or length-N) and ``perm`` override the random draws; when
    either is given the probability gate is skipped.
    """
    if not training:
        return f
    n = f.shape[0]
    if n < 2:
        log.info("mixstyle: batch of %d, skipping", n)
        return f
    forced = lam is not None or perm is not None
    if not forced:
        if rng is None:
            raise RuntimeError("mixstyle needs an explicit random source in training mode")
        if rng.uniform() >= cfg.p:
            return f
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=n)
    if perm is None:
        perm = rng.permutation(n)
    lam = torch.as_tensor(np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy(),
                          dtype=f.dtype, device=f.device).view(n, 1, 1, 1)
    perm = torch.as_tensor(np.asarray(perm), device=f.device, dtype=torch.long)
    mu, sig = _instance_stats(f, eps)
    normed = (f - mu) / sig
    mu_mix = lam * mu + (1 - lam) * mu[perm]
    sig_mix = lam * sig + (1 - lam) * sig[perm]
    return normed * sig_mix + mu_mix


def dsu_apply(f, cfg: StylePluginConfig, rng: np.random.Generator | None, training: bool,
              noise=None, eps: float = 1e-6):
    """Perturb channel statistics with Gaussian noise scaled by their batch spread.

    ``noise`` is an optional pair ``(eps_mu, eps_sig)`` of N x C arrays; giving
    it skips the probability gate.
    """
    if not training:
        return f
    n, c = f.shape[:2]
    if n < 2:
        log.info("dsu: batch of %d, skipping", n)
        return f
    if noise is None:
        if rng is None:
            raise RuntimeError("dsu needs an explicit random source in training mode")
        if rng.uniform() >= cfg.p:
            return f
        noise = rng.standard_normal((2, n, c))
    e_mu, e_sig = (torch.as_tensor(np.asarray(z), dtype=f.dtype, device=f.device).view(n, c, 1, 1) for z in noise)
    mu, sig = _instance_stats(f, eps)
    spread_mu = mu.var(dim=0, keepdim=True, unbiased=False).sqrt()
    spread_sig = sig.var(dim=0, keepdim=True, unbiased=False).sqrt()
    beta = mu + e_mu * spread_mu
    gamma = sig + e_sig * spread_sig
    return (f - mu) / sig * gamma + beta


class StylePlugin(nn.Module):
    """Base for feature-statistics plugins; identity outside training mode."""

    def __init__(self, cfg: StylePluginConfig):
        super().__init__()
        self.cfg = cfg
        self.rng: np.random.Generator | None = None

    def extra_repr(self):
        return f"p={self.cfg.p}, alpha={self.cfg.alpha}"


class MixStyle(StylePlugin):
    def forward(self, f):
        return mixstyle_apply(f, self.cfg, self.rng, self.training)


class DSU(StylePlugin):
    def forward(self, f):
        return dsu_apply(f, self.cfg, self.rng, self.training)


PLUGINS: dict[str, Callable[[StylePluginConfig], nn.Module]] = {"mixstyle": MixStyle, "dsu": DSU}


def register_plugin(kind: str, factory: Callable[[StylePluginConfig], nn.Module]) -> None:
    """Make ``plugin.kind = <kind>`` available (e.g. for a CSU implementation)."""
    if kind == "none":
        raise ValueError("'none' is reserved")
    PLUGINS[kind] = factory


def make_plugin(cfg: StylePluginConfig) -> nn.Module:
    if cfg.kind == "none":
        return nn.Identity()
    if cfg.kind not in PLUGINS:
        raise ValueError(f"unknown plugin {cfg.kind!r}; registered: {sorted(PLUGINS)}")
    return PLUGINS[cfg.kind](cfg)


# ---------------------------------------------------------------- stem and body

class Stem(nn.Module):
    """One convolution + batch norm + ReLU."""

    def __init__(self, in_channels: int, channels: int, kernel: int, stride: int, padding: int, bias: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, channels, kernel, stride, padding, bias=bias)
        self.bn = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU(inplace=True)
        self.out_channels = channels

    def pre_activation(self, x):
        return self.bn(self.conv(x))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.conv.in_channels:
            raise ValueError(f"stem expects N x {self.conv.in_channels} x H x W input, got {tuple(x.shape)}")
        return self.relu(self.pre_activation(x))

    def output_size(self, size: int) -> int:
        k, s, p = self.conv.kernel_size[0], self.conv.stride[0], self.conv.padding[0]
        return (size + 2 * p - k) // s + 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.shortcut(x))


class Body(nn.Module):
    """Everything after the stem; three plugin slots (after stem, block 1, block 2)."""

    def __init__(self, blocks: list[nn.Module], head_in: int, pre: nn.Module | None = None,
                 plugin: StylePluginConfig | None = None, plugin_layers=(0, 1, 2)):
        super().__init__()
        self.pre = pre if pre is not None else nn.Identity()
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(head_in, 1)
        plugin = plugin or StylePluginConfig()
        self.plugins = nn.ModuleList(
            make_plugin(plugin) if i in plugin_layers else nn.Identity() for i in range(3)
        )

    def forward(self, f):
        x = self.plugins[0](f)
        x = self.pre(x)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i + 1 < 3:
                x = self.plugins[i + 1](x)
        return self.fc(torch.flatten(self.pool(x), 1))


def _resnet_layer(cin, cout, stride):
    from torchvision.models.resnet import BasicBlock

    down = None
    if stride != 1 or cin != cout:
        down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
    return nn.Sequential(BasicBlock(cin, cout, stride, down), BasicBlock(cout, cout))


def build_stem(cfg: BackboneConfig) -> Stem:
    if cfg.kind == "resnet18":
        return Stem(cfg.in_channels, 64, 7, 2, 3)
    s = cfg.stem_stride
    if s <= 2:
        return Stem(cfg.in_channels, cfg.stem_channels, 3, s, 1)
    return Stem(cfg.in_channels, cfg.stem_channels, s, s, 0)


def build_body(cfg: BackboneConfig, plugin: StylePluginConfig | None = None) -> Body:
    if cfg.kind == "resnet18":
        widths = (64, 128, 256, 512)
        blocks = [_resnet_layer(64, 64, 1)]
        blocks += [_resnet_layer(widths[i - 1], widths[i], 2) for i in range(1, 4)]
        return Body(blocks, 512, pre=nn.MaxPool2d(3, 2, 1), plugin=plugin, plugin_layers=cfg.plugin_layers)
    ch = (cfg.stem_channels, *cfg.widths)
    blocks = [ResBlock(ch[i], ch[i + 1], 2) for i in range(3)]
    return Body(blocks, ch[-1], plugin=plugin, plugin_layers=cfg.plugin_layers)


# ---------------------------------------------------------------- decoder

class Pointwise(nn.Conv2d):
    """1x1 convolution evaluated as a channel matmul (much faster on CPU for few channels)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, 1)

    def forward(self, x):
        w = self.weight.view(self.out_channels, self.in_channels)
        return F.linear(x.movedim(1, -1), w, self.bias).movedim(-1, 1)


class StyleDecoder(nn.Module):
    """Maps style features to an ``r x r`` image.

    A 1x1 entry convolution, then per factor-of-two step a nearest upsample +
    3x3 conv + ReLU (or a stride-2 3x3 conv + ReLU when shrinking; a single
    3x3 block when sizes already match), then a 1x1 conv to image channels.
    The output is not squashed.
    """

    def __init__(self, in_channels: int, in_size: int, cfg: DecoderConfig, out_channels: int = 3):
        super().__init__()
        r = cfg.resolution
        ratio = r / in_size
        steps = round(math.log2(ratio))
        if 2.0 ** steps != ratio:
            raise ValueError(f"decoder cannot map {in_size}x{in_size} features to {r}x{r}")
        self.resolution = r
        widths = list(cfg.widths)

        def width_at(i):
            return widths[min(i, len(widths) - 1)]

        layers: list[nn.Module] = [nn.Conv2d(in_channels, width_at(0), 1), nn.ReLU(inplace=True)]
        prev = width_at(0)
        if steps == 0:
            layers += [nn.Conv2d(prev, prev, 3, 1, 1), nn.ReLU(inplace=True)]
        for i in range(abs(steps)):
            w = width_at(i)
            if steps > 0:
                layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(prev, w, 3, 1, 1)]
            else:
                layers += [nn.Conv2d(prev, w, 3, 2, 1)]
            layers.append(nn.ReLU(inplace=True))
            prev = w
        self.net = nn.Sequential(*layers)
        self.out = Pointwise(prev, out_channels)

    def forward(self, f):
        y = self.out(self.net(f))
        if y.shape[-1] != self.resolution:
            raise ValueError(f"decoder produced {y.shape[-1]}, configured for {self.resolution}")
        return y


# ---------------------------------------------------------------- full network

@dataclass(frozen=True)
class NetworkConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig | None = field(default_factory=DecoderConfig)
    plugin: StylePluginConfig = field(default_factory=StylePluginConfig)
    use_gate: bool = True
    use_projection: bool = True
    tau: float = 0.1
    proj_dim: int = 128
    proj_hidden: int = 0
    image_size: int = 96


class SDGNet(nn.Module):
    """Stem, optional channel gate + projection head + decoder, and body.

    The inference path is ``stem -> structure half -> body``; without a gate the
    stem output goes straight into the body.  One projection head serves both
    halves of all three views.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = build_stem(cfg.backbone)
        c = self.stem.out_channels
        self.stem_size = self.stem.output_size(cfg.image_size)
        self.gate = ChannelGate(c, cfg.tau) if cfg.use_gate else None
        self.proj = ProjectionHead(c, cfg.proj_dim, cfg.proj_hidden) if cfg.use_gate and cfg.use_projection else None
        self.decoder = StyleDecoder(c, self.stem_size, cfg.decoder, cfg.backbone.in_channels) \
            if cfg.use_gate and cfg.decoder is not None else None
        self.body = build_body(cfg.backbone, cfg.plugin)

    def set_plugin_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, StylePlugin):
                m.rng = rng

    def forward(self, x):
        f = self.stem(x)
        if self.gate is not None:
            f = self.gate.structure(f)
        return self.body(f)


def stem_forward(x, net: SDGNet):
    return net.stem(x)


def backbone_forward(f_str, net: SDGNet):
    return net.body(f_str)


def decode_style(f_sty, net: SDGNet):
    if net.decoder is None:
        raise ValueError("network has no style decoder")
    return net.decoder(f_sty)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
