"""Text normalization, URL splitting, and character tri-gram hashing.

Words are mapped into a closed 37-symbol space (boundary marker '#', 'a'-'z',
'0'-'9'); tri-grams over that alphabet are enumerated exactly, so there are
no hash collisions and the space has 37**3 = 50653 dimensions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import SparseVector
from .errors import DataError

ALPHABET = "#" + "abcdefghijklmnopqrstuvwxyz" + "0123456789"
TRIGRAM_DIM = len(ALPHABET) ** 3  # 50653

_CHAR_ORD = {c: i for i, c in enumerate(ALPHABET)}
_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TrigramSpace:
    """The closed tri-gram index space shared by every encoder."""

    alphabet: str = ALPHABET

    @property
    def dim(self) -> int:
        return len(self.alphabet) ** 3

    def char_ord(self, c: str) -> int:
        try:
            return _CHAR_ORD[c]
        except KeyError:
            raise DataError(f"character {c!r} outside the hashing alphabet") from None

    def index(self, trigram: str) -> int:
        if len(trigram) != 3:
            raise DataError("trigram must have exactly 3 characters")
        base = len(self.alphabet)
        return (self.char_ord(trigram[0]) * base * base
                + self.char_ord(trigram[1]) * base
                + self.char_ord(trigram[2]))


DEFAULT_SPACE = TrigramSpace()


@dataclass(frozen=True)
class TokenSequence:
    """Normalized tokens capped to a fixed per-field length."""

    tokens: tuple[str, ...]
    true_length: int
    max_length: int


@dataclass(frozen=True)
class EncodedText:
    """A fixed-length sequence of sparse term vectors plus the unpadded length.

    The flat arrays pack every vector's entries end to end (token_counts[t]
    entries per token), which is what the batched embedding op consumes.
    """

    vectors: tuple[SparseVector, ...] = field(repr=False)
    true_length: int
    flat_indices: np.ndarray = field(repr=False, compare=False)
    flat_values: np.ndarray = field(repr=False, compare=False)
    token_counts: np.ndarray = field(repr=False, compare=False)


def _pack(vectors: list[SparseVector], true_length: int) -> EncodedText:
    counts = np.array([sv.indices.size for sv in vectors], dtype=np.int64)
    if counts.sum():
        flat_idx = np.concatenate([sv.indices for sv in vectors if sv.indices.size])
        flat_val = np.concatenate([sv.values for sv in vectors if sv.indices.size])
    else:
        flat_idx = np.empty(0, dtype=np.int64)
        flat_val = np.empty(0, dtype=np.float64)
    return EncodedText(vectors=tuple(vectors), true_length=true_length,
                       flat_indices=flat_idx, flat_values=flat_val, token_counts=counts)


def normalize(text: str) -> list[str]:
    """Lowercase and split on every maximal run of non-alphanumeric characters.

    Characters outside ASCII a-z / 0-9 (after lowercasing) act as token
    boundaries, which keeps the output inside the hashing alphabet.
    """
    return _TOKEN_RE.findall(text.lower())


def split_url(url: str) -> list[str]:
    """Split a URL into tokens on every non-alphanumeric character.

    Scheme separators, dots, slashes and hyphens all break tokens; the result
    is the same normalization used for running text.
    """
    return normalize(url)


def cap_tokens(tokens: list[str], max_length: int) -> TokenSequence:
    if max_length < 1:
        raise DataError("max_length must be at least 1")
    kept = tuple(tokens[:max_length])
    return TokenSequence(tokens=kept, true_length=len(kept), max_length=max_length)


def hash_word(word: str, space: TrigramSpace = DEFAULT_SPACE) -> SparseVector:
    """Count the boundary-wrapped character tri-grams of a word.

    '#word#' is scanned with a window of 3, so a word of length L yields L
    tri-grams; repeated tri-grams accumulate counts.
    """
    if not word:
        raise DataError("hash_word requires a nonempty word; padding is an empty vector")
    wrapped = f"#{word}#"
    counts: dict[int, float] = {}
    for i in range(len(wrapped) - 2):
        idx = space.index(wrapped[i:i + 3])
        counts[idx] = counts.get(idx, 0.0) + 1.0
    return SparseVector(space.dim, list(counts.keys()), list(counts.values()))


@lru_cache(maxsize=1 << 16)
def _hash_word_cached(word: str, space: TrigramSpace) -> SparseVector:
    # SparseVector is treated as immutable, so sharing across sequences is safe
    return hash_word(word, space)


def encode_text(text: str, max_length: int,
                space: TrigramSpace = DEFAULT_SPACE) -> EncodedText:
    """Normalize, truncate to ``max_length`` words, hash, and zero-pad."""
    return encode_tokens(normalize(text), max_length, space)


def encode_tokens(tokens: list[str], max_length: int,
                  space: TrigramSpace = DEFAULT_SPACE) -> EncodedText:
    """Like ``encode_text`` for an already-tokenized input (URL splitting)."""
    seq = cap_tokens(tokens, max_length)
    vectors = [_hash_word_cached(w, space) for w in seq.tokens]
    vectors += [SparseVector.empty(space.dim)] * (max_length - seq.true_length)
    return _pack(vectors, seq.true_length)
