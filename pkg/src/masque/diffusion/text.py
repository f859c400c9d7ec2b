"""Word-level tokenizer for the toy text encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass

import torch

from masque.errors import UnknownTokens
from masque.faces import MAKEUP_COLORS, MAKEUP_PALETTES

BOS, PAD = "<bos>", "<pad>"

VOCAB = (
    BOS, PAD, "a", "face", "with", "and",
    *sorted(MAKEUP_COLORS),
    *sorted(MAKEUP_PALETTES),
    "lips", "eyes", "cheeks", "skin", "makeup",
)


def normalize(prompt: str) -> str:
    return re.sub(r"\s+", " ", prompt.strip().lower())


@dataclass(frozen=True)
class TextEmbedding:
    """Token embeddings of one prompt, padded to the encoder length.

    ``alignment[k]`` is the token position of the k-th word of the normalized
    prompt; position 0 is always the BOS token.
    """

    prompt: str
    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    array: torch.Tensor  # (num_tokens, dim)
    alignment: tuple[int, ...]

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in self.alignment)

    def with_array(self, array: torch.Tensor) -> "TextEmbedding":
        return TextEmbedding(self.prompt, self.tokens, self.ids, array, self.alignment)


class Tokenizer:
    def __init__(self, vocab=VOCAB, max_tokens: int = 12):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_tokens = max_tokens

    def tokenize(self, prompt: str) -> tuple[list[str], list[int], list[int]]:
        words = normalize(prompt).split(" ") if normalize(prompt) else []
        unknown = sorted({w for w in words if w not in self.index or w in (BOS, PAD)})
        if unknown:
            raise UnknownTokens(f"prompt {prompt!r} has words outside the toy vocabulary: {unknown}")
        if len(words) + 1 > self.max_tokens:
            raise UnknownTokens(f"prompt {prompt!r} exceeds {self.max_tokens - 1} words")
        tokens = [BOS] + words + [PAD] * (self.max_tokens - 1 - len(words))
        ids = [self.index[t] for t in tokens]
        return tokens, ids, list(range(1, len(words) + 1))
