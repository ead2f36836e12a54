"""Volumetric transformer encoder: 3D patch tokens -> shared embedding space.

Patch tokens are ordered block-row-major over the (axis0, axis1, axis2) block
grid; un-patchify inverts patchify exactly.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .textenc import TransformerBlock


def patchify(vol: torch.Tensor, patch: int) -> torch.Tensor:
    """(H, W, D) or (B, H, W, D) volume -> (B, N, patch**3) token matrix."""
    squeeze = vol.dim() == 3
    if squeeze:
        vol = vol[None]
    b, h, w, d = vol.shape
    if h % patch or w % patch or d % patch:
        raise ValueError(f"patch size {patch} does not divide volume shape {(h, w, d)}")
    x = vol.reshape(b, h // patch, patch, w // patch, patch, d // patch, patch)
    x = x.permute(0, 1, 3, 5, 2, 4, 6)
    tokens = x.reshape(b, (h // patch) * (w // patch) * (d // patch), patch ** 3)
    return tokens[0] if squeeze else tokens


def unpatchify(tokens: torch.Tensor, patch: int, shape: tuple[int, int, int]
               ) -> torch.Tensor:
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens[None]
    b = tokens.shape[0]
    h, w, d = shape
    x = tokens.reshape(b, h // patch, w // patch, d // patch, patch, patch, patch)
    x = x.permute(0, 1, 4, 2, 5, 3, 6)
    vol = x.reshape(b, h, w, d)
    return vol[0] if squeeze else vol


class VisionEncoder(nn.Module):
    """3D patch transformer with a CLS token, projected and L2-normalized."""

    def __init__(self, volume_shape: tuple[int, int, int] = (32, 32, 32),
                 patch: int = 8, width: int = 128, layers: int = 4,
                 heads: int = 4, out_dim: int = 128):
        super().__init__()
        for n in volume_shape:
            if n % patch:
                raise ValueError(f"patch {patch} does not divide shape {volume_shape}")
        self.volume_shape = tuple(volume_shape)
        self.patch = patch
        self.out_dim = out_dim
        n_tokens = (volume_shape[0] // patch) * (volume_shape[1] // patch) \
            * (volume_shape[2] // patch)
        self.patch_proj = nn.Linear(patch ** 3, width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_emb = nn.Parameter(torch.zeros(n_tokens + 1, width))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, out_dim)

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        squeeze = vol.dim() == 3
        if squeeze:
            vol = vol[None]
        if tuple(vol.shape[1:]) != self.volume_shape:
            raise ValueError(
                f"volume shape {tuple(vol.shape[1:])} incompatible with "
                f"encoder shape {self.volume_shape}")
        tokens = patchify(vol, self.patch)
        x = self.patch_proj(tokens)
        cls = self.cls_token.expand(x.shape[0], -1, -1).to(x.dtype)
        x = torch.cat([cls, x], dim=1) + self.pos_emb[None, : x.shape[1] + 1]
        for block in self.blocks:
            x = block(x)
        pooled = self.final_norm(x[:, 0])
        h = self.proj(pooled)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite volume embedding")
        h = F.normalize(h, dim=-1)
        return h[0] if squeeze else h
