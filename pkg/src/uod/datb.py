"""Shifted-window transformer encoder built from domain-adaptive blocks.

A block variant selects which domain-adaptive parts are switched on:

    base  - plain pre-norm block, everything shared
    +D    - per-domain diagonal scalings D1, D2
    +Q    - per-domain query projection
    full  - both

Feature maps are channels-last ``B x H x W x C`` inside the encoder.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from uod.universal_conv import DomainParameters, DomainSpecific, MultiScaleFeatures, UNetDecoder

VARIANTS = ("base", "+D", "+Q", "full")


def variant_flags(variant: str) -> tuple[bool, bool]:
    """(per-domain query, per-domain diagonals) for a block variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}; choose from {VARIANTS}")
    return variant in ("+Q", "full"), variant in ("+D", "full")


def window_partition(x: torch.Tensor, m: int) -> torch.Tensor:
    """B x H x W x C -> (B * nW) x m*m x C."""
    b, h, w, c = x.shape
    x = x.view(b, h // m, m, w // m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, m * m, c)


def window_reverse(windows: torch.Tensor, m: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = windows.view(b, h // m, w // m, m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def relative_position_index(m: int, table_window: Optional[int] = None) -> torch.Tensor:
    """Index into a (2M-1)^2 bias table for every token pair of an m x m window (m <= M)."""
    big = table_window or m
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (big - 1)
    return rel[..., 0] * (2 * big - 1) + rel[..., 1]


def shift_mask(h: int, w: int, m: int, shift: int, device=None) -> torch.Tensor:
    """Additive attention mask (nW x m*m x m*m) for a cyclically shifted partition."""
    img = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    win = window_partition(img, m).squeeze(-1)
    mask = win[:, None, :] - win[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    """Multi-head attention inside windows with a shared relative position bias.

    With ``per_domain_query`` the query projection is duplicated per domain;
    keys, values and the output projection are always shared.
    """

    def __init__(self, dim: int, num_heads: int, window: int, num_domains: int, per_domain_query: bool = True,
                 scaled: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads, self.window = dim, num_heads, window
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5 if scaled else 1.0
        self.per_domain_query = per_domain_query
        q = nn.Linear(dim, dim)
        self.q = DomainSpecific(q, num_domains) if per_domain_query else q
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self._rel_index: dict[int, torch.Tensor] = {}
        self.last_attn: Optional[torch.Tensor] = None

    def rel_index(self, n: int) -> torch.Tensor:
        if n not in self._rel_index:
            m = int(round(n**0.5))
            if m * m != n or m > self.window:
                raise ValueError(f"{n} tokens do not form a window of side <= {self.window}")
            self._rel_index[n] = relative_position_index(m, self.window)
        return self._rel_index[n]

    def query(self, d: int) -> nn.Linear:
        return self.q.pick(d) if self.per_domain_query else self.q

    def forward(self, x: torch.Tensor, d: int, mask: Optional[torch.Tensor] = None, keep_attn: bool = False):
        bw, n, c = x.shape
        split = lambda t: t.view(bw, n, self.num_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.query(d)(x)), split(self.k(x)), split(self.v(x))
        logits = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.rel_bias[self.rel_index(n).reshape(-1)].view(n, n, -1).permute(2, 0, 1)
        logits = logits + bias[None]
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            logits = logits.view(bw, self.num_heads, n, n)
        attn = logits.softmax(dim=-1)
        self.last_attn = attn.detach() if keep_attn else None
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm window-attention block; domain-adaptive per ``variant``.

    base: y_hat = MSA(LN(x)) + x;          y = MLP(LN(y_hat)) + y_hat
    full: y_hat = D1 * MSA_Qd(LN(x)) + x;  y = D2 * (MLP(LN(y_hat)) + y_hat)
    """

    def __init__(self, dim: int, num_heads: int, num_domains: int, window: int = 8, shift: int = 0,
                 variant: str = "full", mlp_ratio: float = 4.0, scaled: bool = True, diag_init: float = 1.0):
        super().__init__()
        per_q, per_d = variant_flags(variant)
        self.variant = variant
        self.dim, self.window, self.shift = dim, window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, num_domains, per_q, scaled)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.d1 = DomainParameters(torch.full((dim,), float(diag_init)), num_domains) if per_d else None
        self.d2 = DomainParameters(torch.full((dim,), float(diag_init)), num_domains) if per_d else None

    def _geometry(self, h: int, w: int) -> tuple[int, int]:
        if min(h, w) <= self.window:
            return min(h, w), 0
        return self.window, self.shift

    def attention_branch(self, x: torch.Tensor, d: int, keep_attn: bool = False) -> torch.Tensor:
        b, h, w, c = x.shape
        m, shift = self._geometry(h, w)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        mask = None
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = shift_mask(hp, wp, m, shift, x.device).to(x.dtype)
        out = self.attn(window_partition(x, m), d, mask, keep_attn)
        out = window_reverse(out, m, hp, wp)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out[:, :h, :w, :].contiguous()

    def forward(self, x: torch.Tensor, d: int = 0, keep_attn: bool = False) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != self.dim:
            raise ValueError(f"expected B x H x W x {self.dim} input, got {tuple(x.shape)}")
        a = self.attention_branch(self.norm1(x), d, keep_attn)
        if self.d1 is not None:
            a = self.d1.pick(d) * a
        y_hat = a + x
        y = self.mlp(self.norm2(y_hat)) + y_hat
        if self.d2 is not None:
            y = self.d2.pick(d) * y
        return y


def basic_block(x: torch.Tensor, block: TransformerBlock) -> torch.Tensor:
    if block.variant != "base":
        raise ValueError("basic_block expects a 'base' variant block")
    return block(x, 0)


def datb_block(x: torch.Tensor, d: int, block: TransformerBlock) -> torch.Tensor:
    return block(x, d)


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class DATEncoder(nn.Module):
    """Patch embedding then stages of regular/shifted block pairs, merging
    between stages except after the last. Emits maps at strides 4, 8, 16, 32."""

    def __init__(self, num_domains: int, in_ch: int = 1, dims: Sequence[int] = (32, 64, 128, 256),
                 depths: Sequence[int] = (2, 2, 2, 2), num_heads: int = 4, window: int = 8, patch: int = 4,
                 variant: str = "full", mlp_ratio: float = 4.0, scaled: bool = True, diag_init: float = 1.0):
        super().__init__()
        if len(dims) != len(depths):
            raise ValueError("dims and depths must have equal length")
        self.in_ch, self.patch, self.dims, self.window = in_ch, patch, tuple(dims), window
        self.variant = variant
        self.embed = nn.Conv2d(in_ch, dims[0], patch, stride=patch)
        self.embed_norm = nn.LayerNorm(dims[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.out_norms = nn.ModuleList()
        for s, (dim, depth) in enumerate(zip(dims, depths)):
            blocks = nn.ModuleList(
                TransformerBlock(dim, num_heads, num_domains, window, 0 if i % 2 == 0 else window // 2,
                                 variant, mlp_ratio, scaled, diag_init)
                for i in range(depth)
            )
            self.stages.append(blocks)
            self.out_norms.append(nn.LayerNorm(dim))
            if s < len(dims) - 1:
                if dims[s + 1] != 2 * dim:
                    raise ValueError("stage dims must double")
                self.merges.append(PatchMerging(dim))
        self.strides = [patch * 2**s for s in range(len(dims))]

    @property
    def size_multiple(self) -> int:
        return self.strides[-1]

    def forward(self, image: torch.Tensor, d: int) -> MultiScaleFeatures:
        if image.ndim != 4 or image.shape[1] != self.in_ch:
            raise ValueError(f"expected B x {self.in_ch} x H x W input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.size_multiple or w % self.size_multiple:
            raise ValueError(f"image size {h}x{w} must be a multiple of {self.size_multiple}")
        x = self.embed_norm(self.embed(image).permute(0, 2, 3, 1))
        feats = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x, d)
            feats.append(self.out_norms[s](x).permute(0, 3, 1, 2).contiguous())
            if s < len(self.merges):
                x = self.merges[s](x)
        return MultiScaleFeatures(feats, list(self.strides), d)


def encoder_forward(encoder: DATEncoder, image: torch.Tensor, d: int) -> MultiScaleFeatures:
    if image.ndim == 3:
        image = image[None]
    return encoder(image, d)


class DATR(nn.Module):
    """Domain-adaptive transformer encoder + domain-adaptive conv decoder."""

    def __init__(self, num_landmarks: Sequence[int], in_ch: int = 1, dims: Sequence[int] = (32, 64, 128, 256),
                 depths: Sequence[int] = (2, 2, 2, 2), num_heads: int = 4, window: int = 8, variant: str = "full",
                 mlp_ratio: float = 4.0, scaled: bool = True, diag_init: float = 1.0):
        super().__init__()
        n = len(num_landmarks)
        self.num_landmarks = list(num_landmarks)
        self.variant = variant
        self.encoder = DATEncoder(n, in_ch, dims, depths, num_heads, window, 4, variant, mlp_ratio, scaled,
                                  diag_init)
        self.decoder = UNetDecoder(dims, self.encoder.strides, n, out_channels=num_landmarks)

    def forward(self, image: torch.Tensor, d: int) -> torch.Tensor:
        return self.decoder(self.encoder(image, d), d)
