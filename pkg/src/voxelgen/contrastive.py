"""Dual-encoder contrastive alignment and the retrieval/zero-shot tasks.

The symmetric InfoNCE objective pulls matched (volume, report) pairs together
against in-batch negatives under a learnable temperature. Ranking metrics
(MAP@K, Recall@K) and prompt-pair zero-shot classification operate on the
frozen embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .textenc import TextEncoder, Vocabulary, batch_tokenize
from .training import TrainingDivergedError, batch_indices, check_finite
from .visionenc import VisionEncoder

TAU_MIN = 1e-3

POSITIVE_PROMPT = "this scan shows signs of {name}."
NEGATIVE_PROMPT = "this scan does not show signs of {name}."


class ClipModel(nn.Module):
    """Text + vision encoders with a learnable log-temperature."""

    def __init__(self, text_encoder: TextEncoder, vision_encoder: VisionEncoder,
                 tau_init: float = 0.07):
        super().__init__()
        if text_encoder.out_dim != vision_encoder.out_dim:
            raise ValueError("text and vision output dimensions must match")
        self.text_encoder = text_encoder
        self.vision_encoder = vision_encoder
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp_min(TAU_MIN)


def similarity_matrix(h_x: torch.Tensor, h_r: torch.Tensor) -> torch.Tensor:
    """S[i][j] = h_x[i] . h_r[j]; rows are volumes, columns are reports."""
    if h_x.shape[1] != h_r.shape[1]:
        raise ValueError(f"embedding dims differ: {h_x.shape[1]} vs {h_r.shape[1]}")
    return h_x @ h_r.T


def info_nce(s: torch.Tensor, tau: torch.Tensor | float, direction: str = "x2r"
             ) -> torch.Tensor:
    """Mean -log softmax of the diagonal, rows as queries ('x2r') or
    columns ('r2x')."""
    if not torch.isfinite(s).all():
        raise FloatingPointError("non-finite similarity matrix")
    if direction == "r2x":
        s = s.T
    elif direction != "x2r":
        raise ValueError(f"unknown direction {direction!r}")
    logits = s / tau
    targets = torch.arange(s.shape[0], device=s.device)
    return F.cross_entropy(logits, targets)


def clip_loss(h_x: torch.Tensor, h_r: torch.Tensor, tau: torch.Tensor | float
              ) -> torch.Tensor:
    s = similarity_matrix(h_x, h_r)
    return info_nce(s, tau, "x2r") + info_nce(s, tau, "r2x")


@dataclass
class ClipTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-5
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    seed: int = 0


def train_clip(model: ClipModel, volumes: torch.Tensor, ids: torch.Tensor,
               masks: torch.Tensor, config: ClipTrainConfig) -> list[float]:
    """Joint contrastive training; returns the per-epoch mean loss history."""
    n = volumes.shape[0]
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay, eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        epoch_losses = []
        for idx in batch_indices(n, config.batch_size, gen):
            if len(idx) < 2:
                continue
            h_x = model.vision_encoder(volumes[idx])
            h_r = model.text_encoder(ids[idx], masks[idx])
            loss = clip_loss(h_x, h_r, model.tau)
            check_finite(loss, "clip", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        history.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    model.eval()
    return history


@dataclass(frozen=True)
class PromptPair:
    positive: str
    negative: str
    class_index: int

    def __post_init__(self):
        if self.positive == self.negative:
            raise ValueError("positive and negative prompts must differ")


def default_prompt_pairs(names: list[str]) -> list[PromptPair]:
    return [PromptPair(POSITIVE_PROMPT.format(name=n),
                       NEGATIVE_PROMPT.format(name=n), k)
            for k, n in enumerate(names)]


@torch.no_grad()
def zero_shot_classify(h_x: torch.Tensor, prompt_pairs: list[PromptPair],
                       model: ClipModel, vocab: Vocabulary) -> np.ndarray:
    """Per-class probability that the positive prompt fits better.

    Returns an (N, K) array; label k is predicted present when p[:, k] > 0.5.
    """
    texts = [p for pair in prompt_pairs for p in (pair.positive, pair.negative)]
    ids, masks = batch_tokenize(texts, vocab, model.text_encoder.max_len)
    h_p = model.text_encoder(ids, masks)  # (2K, d)
    sims = h_x @ h_p.T                    # (N, 2K)
    probs = []
    for k in range(len(prompt_pairs)):
        pair_sims = sims[:, 2 * k:2 * k + 2]
        probs.append(torch.softmax(pair_sims, dim=1)[:, 0])
    return torch.stack(probs, dim=1).cpu().numpy()


def rank_gallery(query: torch.Tensor, gallery: torch.Tensor) -> np.ndarray:
    """Gallery indices by descending similarity; ties keep ascending index."""
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    scores = (gallery @ query).detach().cpu().numpy().astype(np.float64)
    return np.argsort(-scores, kind="stable")


def map_at_k(rankings: list[np.ndarray], relevance: list[set[int]], k: int) -> float:
    """Mean AP@K: per query (1/min(K, R)) * sum of precision@r at relevant
    ranks r <= K; queries with no relevant items are excluded."""
    if k < 1:
        raise ValueError("K must be >= 1")
    aps = []
    for ranked, rel in zip(rankings, relevance):
        if not rel:
            continue
        hits = 0
        score = 0.0
        for r, idx in enumerate(ranked[:k], start=1):
            if int(idx) in rel:
                hits += 1
                score += hits / r
        aps.append(score / min(k, len(rel)))
    if not aps:
        raise ValueError("every query has an empty relevance set")
    return float(np.mean(aps))


def recall_at_k(rankings: list[np.ndarray], truth: list[int], k: int) -> float:
    """Fraction of queries whose true item appears in the top K."""
    if k < 1:
        raise ValueError("K must be >= 1")
    hits = sum(1 for ranked, t in zip(rankings, truth) if t in ranked[:k])
    return hits / len(rankings)


def relevance_sets(query_labels: np.ndarray, gallery_labels: np.ndarray,
                   iou_threshold: float = 0.0, exclude_self: bool = True
                   ) -> list[set[int]]:
    """Relevance by label IoU: > threshold (default: shares any abnormality)."""
    sets = []
    for qi, ql in enumerate(query_labels):
        rel = set()
        for gi, gl in enumerate(gallery_labels):
            if exclude_self and qi == gi:
                continue
            inter = int(np.sum((ql == 1) & (gl == 1)))
            union = int(np.sum((ql == 1) | (gl == 1)))
            iou = inter / union if union else 0.0
            if iou > iou_threshold:
                rel.add(gi)
        sets.append(rel)
    return sets
