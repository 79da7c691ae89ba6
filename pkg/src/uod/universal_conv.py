"""Domain-adaptive convolutional networks.

Every convolution is a domain adaptor: a per-domain depthwise spatial filter
followed by a shared 1x1 pointwise mix. Per-domain parameters live in
``DomainSpecific`` / ``DomainParameters`` containers so the shared/domain
partition can be read off the module tree.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

SHARED = "shared"

STAGE1_CHANNELS = (16, 32, 64, 128, 256)


class DomainSpecific(nn.ModuleList):
    """One module per domain; entry ``d`` is used only for domain ``d``."""

    def __init__(self, template: Optional[nn.Module] = None, num_domains: int = 0, modules=None):
        if modules is None:
            modules = [copy.deepcopy(template) for _ in range(num_domains)]
        super().__init__(modules)

    def pick(self, d: int) -> nn.Module:
        if not 0 <= d < len(self):
            raise IndexError(f"unregistered domain {d} (have {len(self)})")
        return self[d]


class DomainParameters(nn.ParameterList):
    """One parameter tensor per domain."""

    def __init__(self, init: torch.Tensor, num_domains: int):
        super().__init__([nn.Parameter(init.detach().clone()) for _ in range(num_domains)])

    def pick(self, d: int) -> nn.Parameter:
        if not 0 <= d < len(self):
            raise IndexError(f"unregistered domain {d} (have {len(self)})")
        return self[d]


def parameter_tags(model: nn.Module) -> dict[str, str]:
    """Map every parameter name to ``"shared"`` or ``"domain<d>"``."""
    owners = {}
    for prefix, mod in model.named_modules():
        if isinstance(mod, (DomainSpecific, DomainParameters)):
            base = f"{prefix}." if prefix else ""
            for k in range(len(mod)):
                owners[f"{base}{k}."] = k
                owners[f"{base}{k}"] = k
    tags = {}
    for name, _ in model.named_parameters():
        tag = SHARED
        for key, k in owners.items():
            if name == key or name.startswith(key if key.endswith(".") else key + "."):
                tag = f"domain{k}"
                break
        tags[name] = tag
    return tags


def he_init_(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


class DomainAdaptorConv(nn.Module):
    """Depthwise k x k filter per domain, then a shared pointwise 1 x 1 conv."""

    def __init__(self, in_ch: int, out_ch: int, num_domains: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.in_ch, self.out_ch = in_ch, out_ch
        spatial = he_init_(nn.Conv2d(in_ch, in_ch, kernel_size, stride, padding, groups=in_ch, bias=False))
        self.spatial = DomainSpecific(spatial, num_domains)
        self.pointwise = he_init_(nn.Conv2d(in_ch, out_ch, 1, bias=bias))

    def forward(self, x: torch.Tensor, d: int) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        return self.pointwise(self.spatial.pick(d)(x))


def adaptor_forward(x: torch.Tensor, d: int, conv: DomainAdaptorConv) -> torch.Tensor:
    return conv(x, d)


class DomainNorm(nn.Module):
    """Batch norm with per-domain running statistics and a shared affine."""

    def __init__(self, ch: int, num_domains: int):
        super().__init__()
        self.stats = DomainSpecific(nn.BatchNorm2d(ch, affine=False), num_domains)
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))

    def forward(self, x, d):
        return self.stats.pick(d)(x) * self.weight[:, None, None] + self.bias[:, None, None]


class ConvBlock(nn.Module):
    """Two adaptor convs, each followed by per-domain norm and ReLU."""

    def __init__(self, in_ch, out_ch, num_domains):
        super().__init__()
        self.c1 = DomainAdaptorConv(in_ch, out_ch, num_domains)
        self.n1 = DomainNorm(out_ch, num_domains)
        self.c2 = DomainAdaptorConv(out_ch, out_ch, num_domains)
        self.n2 = DomainNorm(out_ch, num_domains)

    def forward(self, x, d):
        x = F.relu(self.n1(self.c1(x, d), d))
        return F.relu(self.n2(self.c2(x, d), d))


@dataclass
class MultiScaleFeatures:
    scales: list  # finest first, each B x C x h x w
    strides: list
    domain_id: int

    def __len__(self):
        return len(self.scales)

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [tuple(s.shape[-2:]) for s in self.scales]


class VGGEncoder(nn.Module):
    """VGG-style pyramid: double conv per level, 2x max-pool between levels."""

    def __init__(self, num_domains: int, in_ch: int = 1, channels: Sequence[int] = STAGE1_CHANNELS):
        super().__init__()
        self.in_ch = in_ch
        self.channels = tuple(channels)
        chans = (in_ch,) + self.channels
        self.levels = nn.ModuleList(ConvBlock(chans[i], chans[i + 1], num_domains) for i in range(len(channels)))
        self.strides = [2**i for i in range(len(channels))]

    def forward(self, x, d) -> MultiScaleFeatures:
        feats = []
        for i, level in enumerate(self.levels):
            if i:
                x = F.max_pool2d(x, 2)
            x = level(x, d)
            feats.append(x)
        return MultiScaleFeatures(feats, list(self.strides), d)


class UNetDecoder(nn.Module):
    """Upsampling path with skip connections down to stride 1.

    ``enc_channels``/``enc_strides`` describe the encoder pyramid finest first.
    When ``out_channels`` (one count per domain) is given, ``forward`` ends in
    a fully domain-specific 1 x 1 projection and a sigmoid.
    """

    def __init__(self, enc_channels: Sequence[int], enc_strides: Sequence[int], num_domains: int,
                 out_channels: Optional[Sequence[int]] = None, min_channels: int = 16):
        super().__init__()
        self.enc_channels = list(enc_channels)
        self.enc_strides = list(enc_strides)
        n = len(enc_channels)
        self.up_blocks = nn.ModuleList()
        self.out_strides = [enc_strides[-1]]
        self.out_channels_per_scale = [enc_channels[-1]]
        ch = enc_channels[-1]
        for i in range(n - 2, -1, -1):
            if enc_strides[i + 1] != 2 * enc_strides[i]:
                raise ValueError("encoder strides must double level to level")
            out = enc_channels[i]
            self.up_blocks.append(ConvBlock(ch + enc_channels[i], out, num_domains))
            self.out_strides.append(enc_strides[i])
            self.out_channels_per_scale.append(out)
            ch = out
        self.tail_blocks = nn.ModuleList()
        s = enc_strides[0]
        while s > 1:
            out = max(min_channels, ch // 2)
            self.tail_blocks.append(ConvBlock(ch, out, num_domains))
            s //= 2
            self.out_strides.append(s)
            self.out_channels_per_scale.append(out)
            ch = out
        self.final_channels = ch
        self.head = None
        if out_channels is not None:
            if len(out_channels) != num_domains:
                raise ValueError("need one output channel count per domain")
            # heads differ in width, so they cannot be tied copies
            self.head = DomainSpecific(modules=[he_init_(nn.Conv2d(ch, int(k), 1)) for k in out_channels])

    def features(self, feats: MultiScaleFeatures, d: int) -> list:
        """Decoder maps, coarsest first, ending at stride 1."""
        if len(feats) != len(self.enc_channels):
            raise ValueError(f"expected {len(self.enc_channels)} scales, got {len(feats)}")
        x = feats.scales[-1]
        outs = [x]
        for j, block in enumerate(self.up_blocks):
            skip = feats.scales[len(feats) - 2 - j]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1), d)
            outs.append(x)
        for block in self.tail_blocks:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(x, d)
            outs.append(x)
        return outs

    def forward(self, feats: MultiScaleFeatures, d: int) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("decoder built without a prediction head")
        x = self.features(feats, d)[-1]
        return torch.sigmoid(self.head.pick(d)(x))


def unet_decode(features: MultiScaleFeatures, d: int, decoder: UNetDecoder) -> torch.Tensor:
    return decoder(features, d)


class SiameseNet(nn.Module):
    """Stage I matching network: VGG adaptor encoder, U-Net adaptor decoder and
    per-scale 1 x 1 adaptor embedding heads. Emits embeddings at strides
    {1, 2, 4, 8, 16} (finest first)."""

    def __init__(self, num_domains: int, in_ch: int = 1, channels: Sequence[int] = STAGE1_CHANNELS,
                 embed_dim: int = 32):
        super().__init__()
        self.num_domains = num_domains
        self.in_ch = in_ch
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        self.encoder = VGGEncoder(num_domains, in_ch, channels)
        self.decoder = UNetDecoder(self.channels, self.encoder.strides, num_domains)
        self.embed = nn.ModuleList(
            DomainAdaptorConv(c, embed_dim, num_domains, kernel_size=1)
            for c in self.decoder.out_channels_per_scale
        )
        self.min_size = 2 ** (len(channels) - 1)

    @property
    def strides(self) -> list[int]:
        return sorted(self.decoder.out_strides)

    def forward(self, x: torch.Tensor, d: int) -> MultiScaleFeatures:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"expected B x {self.in_ch} x H x W input, got {tuple(x.shape)}")
        if x.shape[-1] % self.min_size or x.shape[-2] % self.min_size:
            raise ValueError(f"input size must be a multiple of {self.min_size}")
        dec = self.decoder.features(self.encoder(x, d), d)
        embs = [head(f, d) for head, f in zip(self.embed, dec)]
        return MultiScaleFeatures(embs[::-1], self.decoder.out_strides[::-1], d)


def siamese_encode(net: SiameseNet, image: torch.Tensor, d: int) -> MultiScaleFeatures:
    if image.ndim == 3:
        image = image[None]
    return net(image, d)
