"""Toy text conditioning: fixed vocabulary, frozen embedding table, positions.

Stands in for a frozen text encoder. The embedding table is generated once
from a fixed seed and never trained; the U-Net's cross-attention projections
learn to consume it. Token id 0 is the reserved null token; the empty
sequence embeds as the null token at position 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..errors import VocabularyError

VOCAB = (
    "<null>",
    "<start>",
    "a",
    "of",
    "and",
    "with",
    "scene",
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
)
NULL_ID = 0
START_ID = 1
COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_IDS = tuple(VOCAB.index(w) for w in COLOR_WORDS)

MAX_TOKENS = 32
TEXT_TABLE_SEED = 7


@dataclass(frozen=True)
class PromptEmbedding:
    token_ids: tuple[int, ...]
    embeddings: torch.Tensor  # (n_tokens, d_text)

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]


def _positional_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * idx / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(torch.float32)


class TextEmbedder:
    """Deterministic lookup + sinusoidal positional encoding."""

    def __init__(self, d_text: int = 32, vocab: tuple[str, ...] = VOCAB, seed: int = TEXT_TABLE_SEED):
        self.d_text = d_text
        self.vocab = vocab
        gen = torch.Generator().manual_seed(seed)
        self.table = torch.randn(len(vocab), d_text, generator=gen) / math.sqrt(d_text)
        self.positions = _positional_table(MAX_TOKENS, d_text)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> list[int]:
        """Whitespace tokenization against the fixed vocabulary."""
        ids = []
        for word in text.split():
            if word not in self.vocab:
                raise VocabularyError(f"unknown word {word!r}; vocabulary: {' '.join(self.vocab)}")
            ids.append(self.vocab.index(word))
        return ids

    def words(self, token_ids) -> str:
        return " ".join(self.vocab[i] for i in token_ids)

    def embed(self, token_ids) -> PromptEmbedding:
        ids = tuple(int(i) for i in token_ids)
        if not ids:
            ids = (NULL_ID,)
        if len(ids) > MAX_TOKENS:
            raise VocabularyError(f"prompt of {len(ids)} tokens exceeds maximum {MAX_TOKENS}")
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise VocabularyError(f"token id {i} outside vocabulary [0, {len(self.vocab)})")
        rows = self.table[list(ids)] + self.positions[: len(ids)]
        return PromptEmbedding(token_ids=ids, embeddings=rows)
