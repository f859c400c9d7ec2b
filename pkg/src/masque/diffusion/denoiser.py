"""Small two-level U-Net with one cross-attention block per level."""
from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

# hook(layer_name, probs) -> probs ; probs has shape (B, positions, tokens)
AttentionHook = Callable[[str, torch.Tensor], torch.Tensor]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial features to prompt tokens."""

    def __init__(self, name, channels, ctx_dim, attn_dim, groups=8):
        super().__init__()
        self.name = name
        self.attn_dim = attn_dim
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.proj = nn.Linear(attn_dim, channels)

    def forward(self, x, ctx, hook: Optional[AttentionHook] = None):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(ctx), self.to_v(ctx)
        probs = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.attn_dim), dim=-1)
        if hook is not None:
            probs = hook(self.name, probs)
        out = self.proj(probs @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ToyUNet(nn.Module):
    """Noise predictor eps(z_t, t, c) over (C, H, W) latents.

    Levels: full latent resolution and half resolution. Cross-attention sits in
    the middle block (half resolution) and in the decoder (full resolution).
    """

    attention_layers = ("mid", "up")

    def __init__(self, latent_channels=12, width=32, mid_width=64, ctx_dim=32, attn_dim=32,
                 vocab_size=32, tdim=64):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, ctx_dim)
        self.tdim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.down_block = ResBlock(width, width, tdim)
        self.downsample = nn.Conv2d(width, mid_width, 3, stride=2, padding=1)
        self.mid_block1 = ResBlock(mid_width, mid_width, tdim)
        self.mid_attn = CrossAttention("mid", mid_width, ctx_dim, attn_dim)
        self.mid_block2 = ResBlock(mid_width, mid_width, tdim)
        self.upsample = nn.Conv2d(mid_width, width, 3, padding=1)
        self.up_block = ResBlock(2 * width, width, tdim)
        self.up_attn = CrossAttention("up", width, ctx_dim, attn_dim)
        self.out_norm = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, t, ctx, hook: Optional[AttentionHook] = None):
        temb = self.time_mlp(timestep_embedding(t, self.tdim).to(z.dtype))
        h0 = self.down_block(self.conv_in(z), temb)
        h = self.mid_block1(self.downsample(h0), temb)
        h = self.mid_attn(h, ctx, hook)
        h = self.mid_block2(h, temb)
        h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up_block(torch.cat([h, h0], dim=1), temb)
        h = self.up_attn(h, ctx, hook)
        return self.conv_out(F.silu(self.out_norm(h)))
