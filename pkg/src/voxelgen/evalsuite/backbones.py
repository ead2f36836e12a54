"""Desk-trained feature extractors and the multi-label factual classifier.

The FID backbones are small CNN classifiers trained on real phantoms; the
feature is the penultimate (pooled) activation. The factual classifier is the
3D variant used end-to-end: its sigmoid outputs score finding presence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..training import batch_indices, check_finite

FEATURE_DIM = 64


class FeatureBackbone2d(nn.Module):
    def __init__(self, num_classes: int, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, feature_dim, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class FeatureBackbone3d(nn.Module):
    def __init__(self, num_classes: int, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv3d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv3d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv3d(32, feature_dim, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool3d(1), nn.Flatten(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class BackboneTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0


def _train_multilabel(model: nn.Module, inputs: torch.Tensor,
                      labels: torch.Tensor, config: BackboneTrainConfig
                      ) -> list[float]:
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    bce = nn.BCEWithLogitsLoss()
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    step = 0
    model.train()
    for _ in range(config.epochs):
        losses = []
        for idx in batch_indices(inputs.shape[0], config.batch_size, gen):
            logits = model(inputs[idx])
            loss = bce(logits, labels[idx].to(logits.dtype))
            check_finite(loss, "backbone", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)))
    model.eval()
    return history


def train_backbone_2d(slices: torch.Tensor, labels: torch.Tensor,
                      num_classes: int, config: BackboneTrainConfig
                      ) -> FeatureBackbone2d:
    """slices: (N, H, W) with per-slice labels inherited from the volume."""
    torch.manual_seed(config.seed)
    model = FeatureBackbone2d(num_classes)
    _train_multilabel(model, slices[:, None], labels, config)
    return model


def train_backbone_3d(volumes: torch.Tensor, labels: torch.Tensor,
                      num_classes: int, config: BackboneTrainConfig
                      ) -> FeatureBackbone3d:
    torch.manual_seed(config.seed)
    model = FeatureBackbone3d(num_classes)
    _train_multilabel(model, volumes[:, None], labels, config)
    return model


# the factual classifier is the 3D backbone used through its sigmoid head
FactualClassifier = FeatureBackbone3d
train_factual_classifier = train_backbone_3d


@torch.no_grad()
def classify(model: FeatureBackbone3d, volumes: torch.Tensor,
             batch_size: int = 64) -> np.ndarray:
    """(N, K) sigmoid scores in (0, 1)."""
    model.eval()
    out = []
    for i in range(0, volumes.shape[0], batch_size):
        out.append(torch.sigmoid(model(volumes[i:i + batch_size, None])))
    return torch.cat(out).cpu().numpy()


@torch.no_grad()
def features_2d(model: FeatureBackbone2d, slices: list[np.ndarray],
                batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.stack(slices), dtype=dtype)[:, None]
    out = [model.features(x[i:i + batch_size])
           for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out).cpu().numpy()


@torch.no_grad()
def features_3d(model: FeatureBackbone3d, volumes: list[np.ndarray],
                batch_size: int = 64) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.stack(volumes), dtype=dtype)[:, None]
    out = [model.features(x[i:i + batch_size])
           for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out).cpu().numpy()
