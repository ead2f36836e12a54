"""Shared training utilities."""

from __future__ import annotations

import torch


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def check_finite(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"{stage}: non-finite loss {loss.item()!r} at step {step}")


def polynomial_lr(base_lr: float, step: int, total_steps: int,
                  power: float = 1.0) -> float:
    """Polynomial decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    return base_lr * (1.0 - frac) ** power


def batch_indices(n: int, batch_size: int, generator: torch.Generator
                  ) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
