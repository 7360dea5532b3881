"""Text-conditioned denoising U-Net with cross-attention in every block.

Three encoder blocks, a bottleneck, and three decoder ("upper") blocks at
64/32/16 resolution. dec1 is the coarsest decoder block (16x16, right
after the bottleneck) and dec3 the finest (64x64); those are the default
homes of the position and preservation guidance terms.

Every block can expose its head-averaged post-softmax cross-attention
probabilities and its output features. Captured tensors stay in the
autograd graph so guidance energies can differentiate through them;
capture never changes the computation itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import CaptureError

ENCODER_BLOCKS = ("enc1", "enc2", "enc3")
DECODER_BLOCKS = ("dec1", "dec2", "dec3")
ALL_BLOCKS = ENCODER_BLOCKS + ("mid",) + DECODER_BLOCKS


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    text_dim: int = 64
    time_dim: int = 128
    num_heads: int = 4
    norm_groups: int = 8

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "text_dim": self.text_dim,
            "time_dim": self.time_dim,
            "num_heads": self.num_heads,
            "norm_groups": self.norm_groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.norm2 = nn.GroupNorm(groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial queries to prompt tokens."""

    def __init__(self, channels: int, text_dim: int, heads: int, groups: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, text):
        """Returns (output, head-averaged attention of shape (B, L, H, W))."""
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        k = self.to_k(text)  # (B, L, C)
        v = self.to_v(text)
        l = k.shape[1]

        def split(m, n):
            return m.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q, h * w), split(k, l), split(v, l)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)  # (B, nh, HW, L)
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).view(b, c, h, w)
        attn_map = probs.mean(dim=1).transpose(1, 2).view(b, l, h, w)
        return x + out, attn_map


class Block(nn.Module):
    """ResBlock followed by cross-attention; one named capture point."""

    def __init__(self, name: str, ch_in: int, ch_out: int, cfg: ModelConfig):
        super().__init__()
        self.name = name
        self.res = ResBlock(ch_in, ch_out, cfg.time_dim, cfg.norm_groups)
        self.attn = CrossAttention(ch_out, cfg.text_dim, cfg.num_heads, cfg.norm_groups)

    def forward(self, x, temb, text, captures, want_attn, want_act):
        h = self.res(x, temb)
        h, attn_map = self.attn(h, text)
        if self.name in want_attn:
            captures[("attn", self.name)] = attn_map
        if self.name in want_act:
            captures[("act", self.name)] = h
        return h


class TextConditionedUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_channels * m for m in cfg.channel_mults]

        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.seq_len, cfg.text_dim))
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim * 2),
            nn.SiLU(),
            nn.Linear(cfg.time_dim * 2, cfg.time_dim),
        )

        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        self.enc1 = Block("enc1", chs[0], chs[0], cfg)
        self.down1 = nn.Conv2d(chs[0], chs[1], 3, stride=2, padding=1)
        self.enc2 = Block("enc2", chs[1], chs[1], cfg)
        self.down2 = nn.Conv2d(chs[1], chs[2], 3, stride=2, padding=1)
        self.enc3 = Block("enc3", chs[2], chs[2], cfg)
        self.mid = Block("mid", chs[2], chs[2], cfg)
        self.dec1 = Block("dec1", chs[2] + chs[2], chs[2], cfg)
        self.up1 = nn.Conv2d(chs[2], chs[1], 3, padding=1)
        self.dec2 = Block("dec2", chs[1] + chs[1], chs[1], cfg)
        self.up2 = nn.Conv2d(chs[1], chs[0], 3, padding=1)
        self.dec3 = Block("dec3", chs[0] + chs[0], chs[0], cfg)
        self.head = nn.Sequential(
            nn.GroupNorm(cfg.norm_groups, chs[0]),
            nn.SiLU(),
            nn.Conv2d(chs[0], cfg.in_channels, 3, padding=1),
        )

    @property
    def block_names(self) -> tuple[str, ...]:
        return ALL_BLOCKS

    def validate_layers(self, layers) -> frozenset[str]:
        layers = frozenset(layers)
        unknown = layers - set(ALL_BLOCKS)
        if unknown:
            raise CaptureError(f"unknown layer ids: {sorted(unknown)}")
        return layers

    def forward(
        self,
        z: torch.Tensor,
        t,
        tokens: torch.Tensor,
        want_attn=frozenset(),
        want_act=frozenset(),
    ):
        """Predict the noise in z at step t; optionally capture layers.

        Returns (eps, captures) where captures maps ("attn"|"act", name)
        to tensors still attached to the autograd graph.
        """
        if isinstance(t, int):
            t = torch.full((z.shape[0],), t, dtype=z.dtype, device=z.device)
        else:
            t = t.to(z.dtype)
        want_attn = self.validate_layers(want_attn)
        want_act = self.validate_layers(want_act)

        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_dim))
        text = self.token_emb(tokens) + self.pos_emb[None, : tokens.shape[1]]
        captures: dict[tuple[str, str], torch.Tensor] = {}

        h1 = self.enc1(self.stem(z), temb, text, captures, want_attn, want_act)
        h2 = self.enc2(self.down1(h1), temb, text, captures, want_attn, want_act)
        h3 = self.enc3(self.down2(h2), temb, text, captures, want_attn, want_act)
        hm = self.mid(h3, temb, text, captures, want_attn, want_act)

        d1 = self.dec1(
            torch.cat([hm, h3], dim=1), temb, text, captures, want_attn, want_act
        )
        u1 = self.up1(nn.functional.interpolate(d1, scale_factor=2, mode="nearest"))
        d2 = self.dec2(
            torch.cat([u1, h2], dim=1), temb, text, captures, want_attn, want_act
        )
        u2 = self.up2(nn.functional.interpolate(d2, scale_factor=2, mode="nearest"))
        d3 = self.dec3(
            torch.cat([u2, h1], dim=1), temb, text, captures, want_attn, want_act
        )
        return self.head(d3), captures

    def resolution_of(self, layer: str) -> int:
        """Spatial resolution of a block's feature grid."""
        size = self.cfg.image_size
        return {
            "enc1": size,
            "enc2": size // 2,
            "enc3": size // 4,
            "mid": size // 4,
            "dec1": size // 4,
            "dec2": size // 2,
            "dec3": size,
        }[layer]
