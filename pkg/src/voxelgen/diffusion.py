"""Forward corruption, noise-prediction training with condition dropout,
classifier-free guided prediction, and the reverse ancestral sampler.

The schedule uses the signal coefficient alpha_t = prod_{s<=t}(1 - beta_s)
with sigma_t = sqrt(1 - alpha_t^2), so alpha_t^2 + sigma_t^2 = 1 at every
step. A compatibility flag switches to the sqrt-of-product convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .training import batch_indices, check_finite, polynomial_lr
from .unet import DenoiserUNet
from .vae import LatentCache, reparameterize


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray   # (T,)
    alphas: np.ndarray  # (T,) cumulative signal coefficient
    sigmas: np.ndarray  # (T,) noise coefficient

    @property
    def steps(self) -> int:
        return len(self.betas)

    def coeffs(self, t: int) -> tuple[float, float]:
        """(alpha_t, sigma_t) for 1 <= t <= T; t = 0 means clean data."""
        if t == 0:
            return 1.0, 0.0
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} out of range [1, {self.steps}]")
        return float(self.alphas[t - 1]), float(self.sigmas[t - 1])


def build_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear", alpha_convention: str = "product"
                   ) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                         f"({beta_start}, {beta_end})")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    cum = np.cumprod(1.0 - betas)
    if alpha_convention == "product":
        alphas = cum
    elif alpha_convention == "sqrt-product":
        alphas = np.sqrt(cum)
    else:
        raise ValueError(f"unknown alpha convention {alpha_convention!r}")
    sigmas = np.sqrt(1.0 - alphas ** 2)
    return NoiseSchedule(betas, alphas, sigmas)


def forward_diffuse(z: torch.Tensor, t: int, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Noisy latent at level t: alpha_t * z + sigma_t * eps."""
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {eps.shape}")
    if t < 1:
        raise ValueError(f"timestep {t} out of range [1, {schedule.steps}]")
    alpha, sigma = schedule.coeffs(t)
    return alpha * z + sigma * eps


def drop_condition(h_r: torch.Tensor, null_embedding: torch.Tensor,
                   p_drop: float, generator: torch.Generator
                   ) -> tuple[torch.Tensor, bool]:
    """Bernoulli(p_drop) replacement of the conditioning embedding."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    dropped = bool(torch.rand((), generator=generator) < p_drop)
    return (null_embedding if dropped else h_r), dropped


def ldm_loss(denoiser: DenoiserUNet, z: torch.Tensor, t: torch.Tensor,
             eps: torch.Tensor, context: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """MSE between injected noise and the denoiser's prediction at the
    per-sample noise level."""
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {eps.shape}")
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t[None].expand(z.shape[0])
    alpha = torch.as_tensor(schedule.alphas, dtype=z.dtype)[t - 1]
    sigma = torch.as_tensor(schedule.sigmas, dtype=z.dtype)[t - 1]
    shape = (-1,) + (1,) * (z.dim() - 1)
    z_noisy = alpha.reshape(shape) * z + sigma.reshape(shape) * eps
    pred = denoiser(z_noisy, t, context)
    return ((eps - pred) ** 2).mean()


def guided_epsilon(denoiser: DenoiserUNet, z_noisy: torch.Tensor,
                   t: torch.Tensor, h_r: torch.Tensor,
                   null_embedding: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guided prediction: uncond + w * (cond - uncond).

    Always exactly two denoiser evaluations.
    """
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    uncond = denoiser(z_noisy, t, null_embedding)
    cond = denoiser(z_noisy, t, h_r)
    # exact endpoint identities at w = 0 and w = 1
    if w == 0.0:
        return uncond
    if w == 1.0:
        return cond
    return uncond + w * (cond - uncond)


def reverse_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
                 schedule: NoiseSchedule, generator: torch.Generator | None = None,
                 eta: float = 0.0, clamp: float = 5.0) -> torch.Tensor:
    """One ancestral step: invert the forward marginal to an estimate of the
    clean latent, clamp it, then re-noise to level t-1. Deterministic when
    eta = 0; at t = 1 the clean estimate is returned directly."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"timestep {t} out of range [1, {schedule.steps}]")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    alpha_t, sigma_t = schedule.coeffs(t)
    z0 = (z_t - sigma_t * eps_hat) / alpha_t
    z0 = z0.clamp(-clamp, clamp)
    if t == 1:
        return z0
    alpha_p, sigma_p = schedule.coeffs(t - 1)
    noise_scale = eta * sigma_p
    dir_scale = float(np.sqrt(max(sigma_p ** 2 - noise_scale ** 2, 0.0)))
    out = alpha_p * z0 + dir_scale * eps_hat
    if noise_scale > 0.0:
        fresh = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        out = out + noise_scale * fresh
    return out


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 5.0
    p_drop: float = 0.1
    eta: float = 0.0
    z0_clamp: float = 5.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")


@torch.no_grad()
def sample(denoiser: DenoiserUNet, h_r: torch.Tensor, null_embedding: torch.Tensor,
           schedule: NoiseSchedule, latent_shape: tuple[int, ...],
           generator: torch.Generator, guidance: GuidanceConfig = GuidanceConfig(),
           ) -> torch.Tensor:
    """Reverse the full schedule from Gaussian noise; h_r may be (d,) for one
    sample or (B, d) for a batch. Returns clean latents."""
    if h_r.dim() == 1:
        h_r = h_r[None]
    batch = h_r.shape[0]
    dtype = h_r.dtype
    z = torch.randn((batch, *latent_shape), generator=generator, dtype=dtype)
    null = null_embedding[None].expand(batch, -1)
    for t in range(schedule.steps, 0, -1):
        tt = torch.full((batch,), t, dtype=torch.int64)
        eps_hat = guided_epsilon(denoiser, z, tt, h_r, null, guidance.scale)
        z = reverse_step(z, eps_hat, t, schedule, generator=generator,
                         eta=guidance.eta, clamp=guidance.z0_clamp)
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite latent at end of sampling")
    return z


@dataclass
class DiffusionTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    lr_power: float = 1.0
    p_drop: float = 0.1
    use_latent_mean: bool = False
    seed: int = 0


def train_diffusion(denoiser: DenoiserUNet, cache: LatentCache,
                    contexts: torch.Tensor, null_embedding: torch.Tensor,
                    schedule: NoiseSchedule, config: DiffusionTrainConfig
                    ) -> list[float]:
    """Noise-prediction training over cached latents with per-sample condition
    dropout and polynomial learning-rate decay. Returns per-epoch losses."""
    n = len(cache)
    if contexts.shape[0] != n:
        raise ValueError(f"{n} cached latents but {contexts.shape[0]} contexts")
    opt = torch.optim.AdamW(denoiser.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    n_batches = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * n_batches
    history = []
    step = 0
    null = null_embedding.detach()
    denoiser.train()
    for epoch in range(config.epochs):
        losses = []
        for idx in batch_indices(n, config.batch_size, gen):
            mu, logvar = cache.mu[idx], cache.logvar[idx]
            if config.use_latent_mean:
                z = mu
            else:
                z = reparameterize(mu, logvar, torch.randn(
                    mu.shape, generator=noise_gen, dtype=mu.dtype))
            b = z.shape[0]
            keep = torch.rand((b,), generator=noise_gen) >= config.p_drop
            context = torch.where(keep[:, None], contexts[idx], null[None])
            t = torch.randint(1, schedule.steps + 1, (b,), generator=noise_gen)
            eps = torch.randn(z.shape, generator=noise_gen, dtype=z.dtype)
            lr = polynomial_lr(config.learning_rate, step, total_steps, config.lr_power)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = ldm_loss(denoiser, z, t, eps, context, schedule)
            check_finite(loss, "diffusion", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)))
    denoiser.eval()
    return history
