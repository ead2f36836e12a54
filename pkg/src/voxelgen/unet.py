"""3D U-Net noise predictor with timestep embedding and cross-attention
conditioning on a single pooled report embedding.

Cross-attention and final output projections are zero-initialized, so at
initialization the network output is independent of the conditioning context.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0
                         ) -> torch.Tensor:
    """Half sin / half cos features over a geometric frequency ladder."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(t.device)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


class CrossAttention(nn.Module):
    """Spatial tokens attend to the conditioning context; residual output."""

    def __init__(self, width: int, context_dim: int, heads: int = 4):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.norm = nn.GroupNorm(8, width)
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_k = nn.Linear(context_dim, width, bias=False)
        self.to_v = nn.Linear(context_dim, width, bias=False)
        self.to_out = nn.Linear(width, width)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """x: (B, C, H, W, D); context: (B, L, context_dim) with L >= 1."""
        b, c, h, w, d = x.shape
        tokens = self.norm(x).reshape(b, c, -1).transpose(1, 2)  # (B, N, C)
        q = self.to_q(tokens)
        k = self.to_k(context)
        v = self.to_v(context)

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, -1).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w, d)
        return x + out


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DenoiserUNet(nn.Module):
    """Noise predictor over latents: two resolution levels with skip
    connections, cross-attention at every level and the bottleneck."""

    def __init__(self, latent_channels: int = 4, base_width: int = 64,
                 context_dim: int = 128, heads: int = 4,
                 blocks_per_level: int = 2):
        super().__init__()
        self.latent_channels = latent_channels
        self.context_dim = context_dim
        w1, w2 = base_width, 2 * base_width
        temb_dim = 4 * base_width
        self.time_embed = TimestepEmbedding(base_width, temb_dim)
        self.stem = nn.Conv3d(latent_channels, w1, 3, padding=1)

        self.down_blocks = nn.ModuleList(
            ResBlock(w1, w1, temb_dim) for _ in range(blocks_per_level))
        self.down_attn = CrossAttention(w1, context_dim, heads)
        self.downsample = nn.Conv3d(w1, w2, 3, stride=2, padding=1)

        self.mid_blocks = nn.ModuleList(
            ResBlock(w2, w2, temb_dim) for _ in range(blocks_per_level))
        self.mid_attn = CrossAttention(w2, context_dim, heads)

        self.upsample = nn.ConvTranspose3d(w2, w1, 4, stride=2, padding=1)
        self.up_blocks = nn.ModuleList(
            [ResBlock(2 * w1, w1, temb_dim)] +
            [ResBlock(w1, w1, temb_dim) for _ in range(blocks_per_level - 1)])
        self.up_attn = CrossAttention(w1, context_dim, heads)

        self.out_norm = nn.GroupNorm(8, w1)
        self.out_conv = nn.Conv3d(w1, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor, context: torch.Tensor
                ) -> torch.Tensor:
        """z: (B, C, h, w, d); t: (B,) int timesteps; context: (B, L, d_ctx)
        or (B, d_ctx) for a single conditioning vector."""
        squeeze = z.dim() == 4
        if squeeze:
            z = z[None]
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, "
                             f"got {z.shape[1]}")
        if context.dim() == 1:
            context = context[None]
        if context.dim() == 2:
            context = context[:, None, :]
        if context.shape[-1] != self.context_dim:
            raise ValueError(f"context width {context.shape[-1]} != {self.context_dim}")
        if context.shape[0] == 1 and z.shape[0] > 1:
            context = context.expand(z.shape[0], -1, -1)
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t[None]
        if t.shape[0] == 1 and z.shape[0] > 1:
            t = t.expand(z.shape[0])

        temb = self.time_embed(t)
        h = self.stem(z)
        for block in self.down_blocks:
            h = block(h, temb)
        h = self.down_attn(h, context)
        skip = h
        h = self.downsample(h)
        for block in self.mid_blocks:
            h = block(h, temb)
        h = self.mid_attn(h, context)
        h = self.upsample(h)
        h = torch.cat([h, skip], dim=1)
        for block in self.up_blocks:
            h = block(h, temb)
        h = self.up_attn(h, context)
        out = self.out_conv(F.silu(self.out_norm(h)))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite denoiser output")
        return out[0] if squeeze else out

    def descriptor(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "context_dim": self.context_dim,
        }
