"""Flat key=value run configuration with typed validation.

One text file drives every pipeline stage. Lines are `key = value`; blank
lines and `#` comments are ignored. Unknown keys are rejected and every
violation is reported at once.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Carries the full list of validation problems."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    seed: int

    # corpus
    corpus_size: int = 512
    grid_size: int = 32
    num_classes: int = 6
    prevalence: float = 0.35
    holdout_size: int = 64

    # shared encoder geometry
    embed_dim: int = 128
    encoder_width: int = 128
    encoder_layers: int = 4
    encoder_heads: int = 4
    patch_size: int = 8
    max_text_len: int = 48

    # contrastive stage
    clip_epochs: int = 30
    clip_batch_size: int = 32
    clip_lr: float = 5e-5
    weight_decay: float = 1e-4
    tau_init: float = 0.07

    # autoencoder stage
    vae_base_width: int = 32
    vae_epochs: int = 30
    vae_batch_size: int = 32
    vae_lr: float = 1e-3
    kl_weight: float = 1e-6
    kl_warmup_fraction: float = 0.1

    # diffusion stage
    unet_base_width: int = 64
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    diffusion_epochs: int = 100
    diffusion_batch_size: int = 32
    diffusion_lr: float = 1e-4
    lr_power: float = 1.0
    p_drop: float = 0.1
    use_latent_mean: bool = False

    # sampling
    guidance_scale: float = 5.0
    eta: float = 0.0

    # evaluation
    retrieval_k: int = 5
    eval_batch_size: int = 32
    classifier_epochs: int = 20
    permutation_trials: int = 200
    utility_size: int = 64

    dtype: str = "float32"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, problems: list[str]):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        problems.append(f"{key}: cannot parse {raw!r} as {kind}")
        return None


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> string-value mapping; duplicate keys are an error."""
    problems: list[str] = []
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected key = value, got {line!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def apply_overrides(raw: dict[str, str], overrides: list[str]) -> dict[str, str]:
    problems = []
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r}: expected key=value")
            continue
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def build_config(raw: dict[str, str]) -> RunConfig:
    """Typed construction plus semantic validation; reports all problems."""
    problems: list[str] = []
    values = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            problems.append(f"unknown key {key!r}")
            continue
        parsed = _parse_value(key, value, problems)
        if parsed is not None:
            values[key] = parsed
    if "seed" not in values:
        problems.append("seed: required and missing")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**values)
    semantic = _validate(cfg)
    if semantic:
        raise ConfigError(semantic)
    return cfg


def _validate(cfg: RunConfig) -> list[str]:
    p: list[str] = []
    if cfg.grid_size < 4 or cfg.grid_size % 4:
        p.append(f"grid_size: must be a positive multiple of 4, got {cfg.grid_size}")
    elif cfg.grid_size % cfg.patch_size:
        p.append(f"grid_size: {cfg.grid_size} not divisible by patch_size {cfg.patch_size}")
    if cfg.corpus_size < 1:
        p.append("corpus_size: must be >= 1")
    if not 0 <= cfg.holdout_size < cfg.corpus_size:
        p.append(f"holdout_size: must be in [0, corpus_size), got {cfg.holdout_size}")
    if not 1 <= cfg.num_classes <= 6:
        p.append(f"num_classes: catalog supports 1..6, got {cfg.num_classes}")
    if not 0.0 < cfg.prevalence < 1.0:
        p.append("prevalence: must be in (0, 1)")
    for name in ("clip_epochs", "vae_epochs", "diffusion_epochs", "timesteps",
                 "classifier_epochs", "encoder_layers", "encoder_heads",
                 "embed_dim", "encoder_width", "max_text_len", "retrieval_k",
                 "permutation_trials", "clip_batch_size", "vae_batch_size",
                 "diffusion_batch_size", "eval_batch_size", "vae_base_width",
                 "unet_base_width", "patch_size", "utility_size"):
        if getattr(cfg, name) < 1:
            p.append(f"{name}: must be >= 1")
    for name in ("clip_lr", "vae_lr", "diffusion_lr", "tau_init"):
        if getattr(cfg, name) <= 0:
            p.append(f"{name}: must be > 0")
    for name in ("weight_decay", "kl_weight", "eta", "guidance_scale", "lr_power"):
        if getattr(cfg, name) < 0:
            p.append(f"{name}: must be >= 0")
    if not 0.0 <= cfg.p_drop <= 1.0:
        p.append("p_drop: must be in [0, 1]")
    if not 0.0 <= cfg.kl_warmup_fraction <= 1.0:
        p.append("kl_warmup_fraction: must be in [0, 1]")
    if not 0.0 < cfg.beta_start <= cfg.beta_end < 1.0:
        p.append("beta schedule: need 0 < beta_start <= beta_end < 1")
    if cfg.dtype not in ("float32", "float64"):
        p.append(f"dtype: must be float32 or float64, got {cfg.dtype!r}")
    return p


def load_config(path: str | os.PathLike, overrides: list[str] | None = None
                ) -> RunConfig:
    with open(path) as f:
        raw = parse_config_text(f.read())
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_config(raw)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical echo of every resolved value, suitable for reproduction."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_snapshot(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
