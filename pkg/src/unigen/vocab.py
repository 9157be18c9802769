"""Toy word-level vocabulary with stable hash buckets.

Words map to ids via CRC32 so the mapping is identical across processes and
runs (Python's builtin hash() is salted per process and unusable here).
"""

from __future__ import annotations

import re
import zlib

# Reserved ids, in order. <eot> terminates native-encoder captions so an empty
# caption still produces one token.
PAD = 0
VISION_START = 1
VISION_END = 2
EOT = 3
N_SPECIALS = 4

_WORD_RE = re.compile(r"[a-z0-9]+")


class HashVocab:
    """Whitespace/character tokenizer over a fixed number of hash buckets."""

    def __init__(self, n_buckets: int = 256):
        if n_buckets < 1:
            raise ValueError("n_buckets must be positive")
        self.n_buckets = n_buckets

    @property
    def size(self) -> int:
        return N_SPECIALS + self.n_buckets

    def word_id(self, word: str) -> int:
        return N_SPECIALS + zlib.crc32(word.encode("utf-8")) % self.n_buckets

    def encode(self, text: str) -> list[int]:
        """Lowercase, split into alphanumeric runs, hash each run to a bucket."""
        return [self.word_id(w) for w in _WORD_RE.findall(text.lower())]


DEFAULT_VOCAB = HashVocab()
