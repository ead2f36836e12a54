"""Versioned checkpoint container shared by all trained components.

A checkpoint carries the format version, a component tag, an architecture
descriptor, the parameter state dict, a snapshot of the training config,
and the torch RNG state at save time so resumed work is reproducible.
"""

from __future__ import annotations

import os

import torch

FORMAT_VERSION = 1
COMPONENTS = ("clip", "vae", "denoiser", "classifier")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, component: str, descriptor: dict,
                    state_dict: dict, train_config: dict,
                    rng_state: torch.Tensor | None = None) -> None:
    if component not in COMPONENTS:
        raise CheckpointError(f"unknown component tag {component!r}; "
                              f"expected one of {COMPONENTS}")
    payload = {
        "format_version": FORMAT_VERSION,
        "component": component,
        "descriptor": dict(descriptor),
        "state_dict": state_dict,
        "train_config": dict(train_config),
        "rng_state": torch.get_rng_state() if rng_state is None else rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike, component: str,
                    descriptor: dict | None = None) -> dict:
    """Load and validate a checkpoint. `descriptor`, when given, must match
    the stored architecture descriptor exactly."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: missing checkpoint header")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} unsupported; "
            f"this build reads version {FORMAT_VERSION}")
    if payload["component"] != component:
        raise CheckpointError(
            f"{path}: holds component {payload['component']!r}, "
            f"requested {component!r}")
    if descriptor is not None and payload["descriptor"] != dict(descriptor):
        raise CheckpointError(
            f"{path}: architecture descriptor mismatch: stored "
            f"{payload['descriptor']}, requested {dict(descriptor)}")
    return payload
