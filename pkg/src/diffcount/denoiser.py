"""Conditional U-Net noise predictor with a count-regression tap.

The crowd image and the corrupted density map are concatenated along the
channel axis at the input. Decoder level outputs are globally average-pooled
and concatenated into one vector that feeds the training-only count head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 4)
    attention_depths: tuple[int, ...] = (2, 3)
    num_res_blocks_per_depth: int = 2
    time_embed_dim: int = 256
    image_channels: int = 3
    density_channels: int = 1
    out_channels: int = 2
    head_channels: int = 32
    dropout: float = 0.0
    count_hidden: tuple[int, ...] = (256, 64)
    count_branch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_depths", tuple(sorted(set(self.attention_depths))))
        object.__setattr__(self, "count_hidden", tuple(self.count_hidden))
        if self.base_channels < 1 or self.time_embed_dim < 1:
            raise ValueError("base_channels and time_embed_dim must be positive")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty sequence of positive ints")
        if self.num_res_blocks_per_depth < 1:
            raise ValueError("num_res_blocks_per_depth must be positive")
        depths = len(self.channel_multipliers)
        if any(d < 0 or d >= depths for d in self.attention_depths):
            raise ValueError(f"attention depths must lie in 0..{depths - 1}")
        if self.out_channels != 2 * self.density_channels:
            raise ValueError("out_channels must hold a noise and a variance output per density channel")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.density_channels

    @property
    def num_downsamples(self) -> int:
        return len(self.channel_multipliers) - 1

    @property
    def pooled_width(self) -> int:
        return self.base_channels * sum(self.channel_multipliers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class FeatureBundle:
    per_level: list[torch.Tensor]
    pooled: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.pooled = torch.cat([z.mean(dim=(2, 3)) for z in self.per_level], dim=1)


def _groups(ch: int) -> int:
    # at least 4 channels per group: one-channel groups amount to instance
    # norm, which strips the per-map mean the noise output has to reproduce
    return math.gcd(ch, min(32, max(1, ch // 4)))


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None].to(t.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, dropout=0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.drop = nn.Dropout(dropout)
        self.conv2 = _zero(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, ch, head_channels=32):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = _zero(nn.Conv1d(ch, ch, 1))

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x).reshape(b, c, h * w))
        q, k, v = qkv.reshape(b * self.heads, 3 * c // self.heads, h * w).chunk(3, dim=1)
        scale = 1.0 / math.sqrt(math.sqrt(c // self.heads))
        attn = torch.softmax(torch.einsum("bct,bcs->bts", q * scale, k * scale), dim=-1)
        out = torch.einsum("bts,bcs->bct", attn, v).reshape(b, c, h * w)
        return x + self.proj(out).reshape(b, c, h, w)


class Downsample(nn.Module):
    def forward(self, x):
        return F.avg_pool2d(x, kernel_size=2, stride=2)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Stage(nn.Module):
    """Residual blocks of one depth, each optionally followed by attention."""

    def __init__(self, blocks, attns):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attns = nn.ModuleList(attns)


class CountHead(nn.Module):
    """Small MLP mapping pooled decoder features to a non-negative count."""

    def __init__(self, in_width, hidden=(256, 64)):
        super().__init__()
        widths = [in_width, *hidden, 1]
        layers = []
        for i in range(len(widths) - 1):
            layers += [nn.Linear(widths[i], widths[i + 1]), nn.ReLU()]
        self.net = nn.Sequential(*layers)
        self.in_width = in_width
        # keep the output ReLU alive at initialisation
        nn.init.constant_(self.net[-2].bias, 1.0)

    def forward(self, pooled):
        if pooled.shape[-1] != self.in_width:
            raise ValueError(f"count head expects width {self.in_width}, got {pooled.shape[-1]}")
        return self.net(pooled).squeeze(-1)


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        c = config
        emb = c.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(c.base_channels, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.input_conv = nn.Conv2d(c.in_channels, c.base_channels, 3, padding=1)

        ch = c.base_channels
        skips = [ch]
        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        depths = len(c.channel_multipliers)
        for level, mult in enumerate(c.channel_multipliers):
            blocks, attns = [], []
            for _ in range(c.num_res_blocks_per_depth):
                blocks.append(ResBlock(ch, mult * c.base_channels, emb, c.dropout))
                ch = mult * c.base_channels
                attns.append(AttentionBlock(ch, c.head_channels) if level in c.attention_depths else nn.Identity())
                skips.append(ch)
            self.down.append(Stage(blocks, attns))
            if level < depths - 1:
                self.downsamplers.append(Downsample())
                skips.append(ch)

        self.mid1 = ResBlock(ch, ch, emb, c.dropout)
        self.mid_attn = AttentionBlock(ch, c.head_channels)
        self.mid2 = ResBlock(ch, ch, emb, c.dropout)

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(depths)):
            mult = c.channel_multipliers[level]
            blocks, attns = [], []
            for _ in range(c.num_res_blocks_per_depth + 1):
                blocks.append(ResBlock(ch + skips.pop(), mult * c.base_channels, emb, c.dropout))
                ch = mult * c.base_channels
                attns.append(AttentionBlock(ch, c.head_channels) if level in c.attention_depths else nn.Identity())
            self.up.append(Stage(blocks, attns))
            if level > 0:
                self.upsamplers.append(Upsample(ch))

        self.out = nn.Sequential(
            nn.GroupNorm(_groups(ch), ch), nn.SiLU(),
            _zero(nn.Conv2d(ch, c.out_channels, 3, padding=1)),
        )
        self.count_head = CountHead(c.pooled_width, c.count_hidden) if c.count_branch else None

    def forward(self, y, xt, t):
        c = self.config
        if y.shape[0] != xt.shape[0] or y.shape[2:] != xt.shape[2:]:
            raise ValueError(f"image {tuple(y.shape)} and map {tuple(xt.shape)} are not aligned")
        factor = 2 ** c.num_downsamples
        if xt.shape[2] % factor or xt.shape[3] % factor:
            raise ValueError(f"spatial size {tuple(xt.shape[2:])} must be divisible by {factor}")
        t = torch.as_tensor(t, device=xt.device).long().reshape(-1)
        if t.numel() == 1:
            t = t.expand(xt.shape[0])
        if (t < 1).any():
            raise ValueError("timesteps are 1-based")
        emb = self.time_mlp(timestep_embedding(t, c.base_channels))

        h = self.input_conv(torch.cat([y, xt], dim=1))
        hs = [h]
        for level, stage in enumerate(self.down):
            for block, attn in zip(stage.blocks, stage.attns):
                h = attn(block(h, emb))
                hs.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
                hs.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        taps = []
        for i, stage in enumerate(self.up):
            for block, attn in zip(stage.blocks, stage.attns):
                h = attn(block(torch.cat([h, hs.pop()], dim=1), emb))
            taps.append(h)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](h)

        out = self.out(h)
        d = c.density_channels
        return out[:, :d], out[:, d:], FeatureBundle(taps)

    def regress_count(self, pooled):
        if self.count_head is None:
            raise RuntimeError("this model was built without a count branch")
        return self.count_head(pooled)


def predict(model: Denoiser, y, xt, t, num_steps: int | None = None):
    """Run the network; ``num_steps`` additionally bounds ``t`` from above."""
    t = torch.as_tensor(t).long()
    if num_steps is not None and (t > num_steps).any():
        raise ValueError(f"timestep beyond 1..{num_steps}")
    return model(y, xt, t)


def regress_count(head: CountHead, pooled):
    return head(pooled)
