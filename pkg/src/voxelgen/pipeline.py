"""End-to-end generation: report text -> guided latent sampling -> decoded
volume."""

from __future__ import annotations

import torch

from .contrastive import ClipModel
from .diffusion import GuidanceConfig, NoiseSchedule, sample
from .textenc import Vocabulary, encode_reports, null_condition_embedding
from .unet import DenoiserUNet
from .vae import VolumeVae
from .volumes import CtVolume, Domain


def check_component_dims(clip: ClipModel, vae: VolumeVae, denoiser: DenoiserUNet
                         ) -> None:
    if clip.text_encoder.out_dim != denoiser.context_dim:
        raise ValueError(
            f"denoiser: context dim {denoiser.context_dim} does not match "
            f"text encoder output dim {clip.text_encoder.out_dim}")
    if vae.latent_channels != denoiser.latent_channels:
        raise ValueError(
            f"denoiser: latent channels {denoiser.latent_channels} do not match "
            f"vae latent channels {vae.latent_channels}")


@torch.no_grad()
def generate_volumes(texts: list[str], clip: ClipModel, vocab: Vocabulary,
                     vae: VolumeVae, denoiser: DenoiserUNet,
                     schedule: NoiseSchedule, guidance: GuidanceConfig,
                     generator: torch.Generator,
                     volume_shape: tuple[int, int, int] = (32, 32, 32),
                     spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
                     ) -> list[CtVolume]:
    """Generate one volume per prompt, batched through the sampler."""
    check_component_dims(clip, vae, denoiser)
    h_r = encode_reports(texts, vocab, clip.text_encoder)
    null = null_condition_embedding(vocab, clip.text_encoder)
    latent_shape = (vae.latent_channels, *(n // 4 for n in volume_shape))
    z0 = sample(denoiser, h_r, null, schedule, latent_shape, generator, guidance)
    decoded = vae.decode(z0)
    return [CtVolume(v.cpu().numpy(), spacing, Domain.NORMALIZED) for v in decoded]


def generate_ct(text: str, clip: ClipModel, vocab: Vocabulary, vae: VolumeVae,
                denoiser: DenoiserUNet, schedule: NoiseSchedule,
                guidance: GuidanceConfig, generator: torch.Generator,
                volume_shape: tuple[int, int, int] = (32, 32, 32),
                ) -> CtVolume:
    return generate_volumes([text], clip, vocab, vae, denoiser, schedule,
                            guidance, generator, volume_shape)[0]
