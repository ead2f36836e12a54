"""Volumetric VAE: 4x spatial compression per axis, reconstruction + KL
training, and a latent-cache file so diffusion training never re-encodes."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .training import batch_indices, check_finite


class VolumeVae(nn.Module):
    """Strided-conv encoder (two 2x downsamples per axis) with mean/log-variance
    heads and a mirrored decoder ending in a sigmoid."""

    def __init__(self, latent_channels: int = 4, base_width: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        w = base_width
        self.encoder = nn.Sequential(
            nn.Conv3d(1, w, 3, stride=2, padding=1),
            nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv3d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Conv3d(2 * w, 2 * w, 3, padding=1),
            nn.SiLU(),
        )
        self.mu_head = nn.Conv3d(2 * w, latent_channels, 1)
        self.logvar_head = nn.Conv3d(2 * w, latent_channels, 1)
        self.decoder = nn.Sequential(
            nn.Conv3d(latent_channels, 2 * w, 3, padding=1),
            nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.ConvTranspose3d(2 * w, w, 4, stride=2, padding=1),
            nn.GroupNorm(8, w), nn.SiLU(),
            nn.ConvTranspose3d(w, w, 4, stride=2, padding=1),
            nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv3d(w, 1, 3, padding=1),
        )

    def encode(self, vol: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, H, W, D) volume -> mean and log-variance, each
        (B, C, H/4, W/4, D/4). Axes must be divisible by 4."""
        squeeze = vol.dim() == 3
        if squeeze:
            vol = vol[None]
        if any(n % 4 for n in vol.shape[1:]):
            raise ValueError(f"volume axes must be divisible by 4, got {tuple(vol.shape[1:])}")
        h = self.encoder(vol[:, None])
        mu, logvar = self.mu_head(h), self.logvar_head(h)
        return (mu[0], logvar[0]) if squeeze else (mu, logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> volume in [0, 1] with 4x upsampling per axis."""
        squeeze = z.dim() == 4
        if squeeze:
            z = z[None]
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, "
                             f"got {z.shape[1]}")
        out = torch.sigmoid(self.decoder(z))[:, 0]
        return out[0] if squeeze else out


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor
                   ) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps; noise is injected by the caller."""
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ValueError(f"shape mismatch: {mu.shape}, {logvar.shape}, {eps.shape}")
    return mu + torch.exp(0.5 * logvar) * eps


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean elementwise KL to the standard normal prior."""
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {mu.shape} vs {logvar.shape}")
    return 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).mean()


def recon_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-wise L1 reconstruction loss."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    return (recon - target).abs().mean()


@dataclass
class VaeTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    kl_weight: float = 1e-6
    kl_warmup_fraction: float = 0.1
    seed: int = 0


def train_vae(model: VolumeVae, volumes: torch.Tensor, config: VaeTrainConfig
              ) -> list[dict]:
    """Minimize recon + kl_weight * KL; kl_weight ramps linearly over the
    first kl_warmup_fraction of steps. Returns per-epoch loss records."""
    n = volumes.shape[0]
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    n_batches = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * n_batches
    warmup = max(1, int(config.kl_warmup_fraction * total_steps))
    history = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        rec_sum, kl_sum = [], []
        for idx in batch_indices(n, config.batch_size, gen):
            batch = volumes[idx]
            mu, logvar = model.encode(batch)
            eps = torch.randn(mu.shape, generator=noise_gen, dtype=mu.dtype)
            z = reparameterize(mu, logvar, eps)
            recon = model.decode(z)
            l_rec = recon_loss(recon, batch)
            l_kl = kl_loss(mu, logvar)
            kl_w = config.kl_weight * min(1.0, (step + 1) / warmup)
            loss = l_rec + kl_w * l_kl
            check_finite(loss, "vae", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec_sum.append(l_rec.item())
            kl_sum.append(l_kl.item())
            step += 1
        history.append({"epoch": epoch, "recon": float(np.mean(rec_sum)),
                        "kl": float(np.mean(kl_sum))})
    model.eval()
    return history


class LatentCache:
    """Precomputed (mean, log-variance) per corpus item, keyed by sample id."""

    def __init__(self, ids: list[str], mu: torch.Tensor, logvar: torch.Tensor):
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate sample ids in latent cache")
        if mu.shape != logvar.shape or mu.shape[0] != len(ids):
            raise ValueError("cache tensors inconsistent with id list")
        self.ids = list(ids)
        self.mu = mu
        self.logvar = logvar

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | os.PathLike) -> None:
        header = {
            "count": len(self.ids),
            "channels": int(self.mu.shape[1]),
            "spatial": list(self.mu.shape[2:]),
            "dtype": str(self.mu.dtype).removeprefix("torch."),
            "ids": self.ids,
        }
        np_dtype = self.mu.numpy().dtype.newbyteorder("<")
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("ascii"))
            for i in range(len(self.ids)):
                f.write(self.mu[i].numpy().astype(np_dtype).tobytes())
                f.write(self.logvar[i].numpy().astype(np_dtype).tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LatentCache":
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("ascii"))
            payload = f.read()
        shape = (header["channels"], *header["spatial"])
        dt = np.dtype(header["dtype"]).newbyteorder("<")
        item = int(np.prod(shape)) * dt.itemsize
        count = header["count"]
        if len(payload) != 2 * count * item:
            raise ValueError("latent cache payload length mismatch")
        mu, logvar = [], []
        for i in range(count):
            off = 2 * i * item
            mu.append(np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)),
                                    offset=off).reshape(shape))
            logvar.append(np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)),
                                        offset=off + item).reshape(shape))
        return cls(header["ids"],
                   torch.from_numpy(np.array(mu)),
                   torch.from_numpy(np.array(logvar)))


@torch.no_grad()
def precompute_latents(model: VolumeVae, ids: list[str], volumes: torch.Tensor,
                       batch_size: int = 32) -> LatentCache:
    model.eval()
    mus, logvars = [], []
    for i in range(0, volumes.shape[0], batch_size):
        mu, logvar = model.encode(volumes[i:i + batch_size])
        mus.append(mu)
        logvars.append(logvar)
    return LatentCache(ids, torch.cat(mus), torch.cat(logvars))
