"""Tokenization and the masked self-attention text encoder.

Reports are lowercased and split on whitespace/punctuation; the encoder is a
small pre-norm transformer pooled at the BOS position, projected into the
shared embedding space and L2-normalized. Padded positions are excluded from
attention, so extra padding never changes the embedding.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<nullcond>")

_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Token -> id map with dense ids; specials appended after corpus tokens."""

    def __init__(self, tokens: list[str]):
        for sp in SPECIAL_TOKENS:
            if sp in tokens:
                raise ValueError(f"special token {sp!r} collides with corpus token")
        self._tokens = list(tokens) + list(SPECIAL_TOKENS)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        base = len(tokens)
        self.pad_id = base
        self.bos_id = base + 1
        self.eos_id = base + 2
        self.unk_id = base + 3
        self.nullcond_id = base + 4

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for t in self._tokens[: len(self._tokens) - len(SPECIAL_TOKENS)]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return cls(tokens)


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Deterministic vocabulary over a corpus: lexicographic token order."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen = set()
    for text in corpus:
        seen.update(split_words(text))
    return Vocabulary(sorted(seen))


@dataclass(frozen=True)
class TokenSequence:
    ids: torch.Tensor   # (L,) int64
    mask: torch.Tensor  # (L,) int64, 1 on non-pad positions


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """BOS + word ids + EOS, truncated keeping EOS, padded to max_len."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    words = split_words(text)[: max_len - 2]
    ids = [vocab.bos_id] + [vocab.id_of(w) for w in words] + [vocab.eos_id]
    n = len(ids)
    ids = ids + [vocab.pad_id] * (max_len - n)
    mask = [1] * n + [0] * (max_len - n)
    return TokenSequence(torch.tensor(ids, dtype=torch.int64),
                         torch.tensor(mask, dtype=torch.int64))


def batch_tokenize(texts: list[str], vocab: Vocabulary, max_len: int
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    return (torch.stack([s.ids for s in seqs]),
            torch.stack([s.mask for s in seqs]))


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None
                ) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class TextEncoder(nn.Module):
    """BERT-style masked self-attention encoder, BOS-pooled, unit-norm output."""

    def __init__(self, vocab_size: int, max_len: int = 48, width: int = 128,
                 layers: int = 4, heads: int = 4, out_dim: int = 128):
        super().__init__()
        self.max_len = max_len
        self.out_dim = out_dim
        self.token_emb = nn.Embedding(vocab_size, width)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, width))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, out_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 1:
            ids, mask = ids[None], mask[None]
        L = ids.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
        x = self.token_emb(ids) + self.pos_emb[:L]
        key_padding = mask == 0
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding)
        pooled = self.final_norm(x[:, 0])  # BOS position
        h = self.proj(pooled)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite text embedding")
        return F.normalize(h, dim=-1)


def encode_reports(texts: list[str], vocab: Vocabulary, encoder: TextEncoder
                   ) -> torch.Tensor:
    ids, mask = batch_tokenize(texts, vocab, encoder.max_len)
    return encoder(ids, mask)


def null_condition_embedding(vocab: Vocabulary, encoder: TextEncoder) -> torch.Tensor:
    """Encoding of the reserved unconditional-context token sequence."""
    device = next(encoder.parameters()).device
    ids = torch.tensor([vocab.bos_id, vocab.nullcond_id, vocab.eos_id], device=device)
    mask = torch.ones(3, dtype=torch.int64, device=device)
    return encoder(ids, mask)[0]
