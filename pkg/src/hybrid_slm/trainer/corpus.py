"""Deterministic synthetic byte corpus.

Three interleaved document kinds exercise different abilities:

* ``text``: pseudo-words drawn from a fixed first-order Markov chain over a
  small lexicon, so local statistics are learnable;
* ``recall``: a list of ``key=value`` pairs followed by queries whose answers
  must be retrieved from earlier in the document;
* ``copy``: a random string followed by a separator and its exact repeat
  (or its reversal), a pure shift/copy pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

VOCAB = 256
DEFAULT_CHARS = 2_000_000
CORPUS_SEED = 20240613
_LETTERS = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    val: np.ndarray

    @property
    def vocab(self) -> int:
        return VOCAB

    def batch(self, rng: np.random.Generator, batch: int, context: int, split: str = "train"):
        """Random windows: inputs ``(B, T)`` and next-byte targets ``(B, T)``."""
        data = self.train if split == "train" else self.val
        starts = rng.integers(0, len(data) - context - 1, size=batch)
        idx = starts[:, None] + np.arange(context + 1)[None, :]
        win = data[idx].astype(np.int64)
        return win[:, :-1], win[:, 1:]

    def eval_windows(self, n: int, context: int):
        """Fixed, evenly spaced validation windows (identical for every run)."""
        stride = max(1, (len(self.val) - context - 1) // max(n, 1))
        starts = np.arange(n) * stride
        idx = starts[:, None] + np.arange(context + 1)[None, :]
        win = self.val[idx].astype(np.int64)
        return win[:, :-1], win[:, 1:]


def _lexicon(rng: np.random.Generator, n_words: int = 400) -> list[bytes]:
    words = set()
    while len(words) < n_words:
        n = int(rng.integers(2, 8))
        words.add(bytes(rng.choice(_LETTERS, size=n)))
    return sorted(words)


def _text_doc(rng, lexicon, cum, n_words: int) -> bytes:
    w = int(rng.integers(len(lexicon)))
    u = rng.random(n_words)
    out = []
    for i in range(n_words):
        out.append(lexicon[w])
        w = min(int(np.searchsorted(cum[w], u[i], side="right")), len(lexicon) - 1)
    return b" ".join(out) + b".\n"


def _recall_doc(rng, n_pairs: int) -> bytes:
    keys = rng.choice(_LETTERS, size=(n_pairs, 2))
    vals = rng.integers(0, 100, size=n_pairs)
    body = b" ".join(bytes(k) + b"=" + str(v).encode() for k, v in zip(keys, vals))
    q = rng.permutation(n_pairs)[: max(1, n_pairs // 2)]
    query = b" ".join(b"?" + bytes(keys[i]) + b"=" + str(vals[i]).encode() for i in q)
    return body + b" | " + query + b"\n"


def _copy_doc(rng) -> bytes:
    n = int(rng.integers(4, 24))
    s = bytes(rng.choice(_LETTERS, size=n))
    if rng.random() < 0.5:
        return b"copy " + s + b" > " + s + b"\n"
    return b"flip " + s + b" > " + s[::-1] + b"\n"


@lru_cache(maxsize=4)
def _generate(n_chars: int, seed: int) -> bytes:
    rng = np.random.default_rng(seed)
    lexicon = _lexicon(rng)
    n = len(lexicon)
    # Sparse transitions: each word has a handful of likely successors.
    trans = np.full((n, n), 1e-3)
    for i in range(n):
        succ = rng.choice(n, size=6, replace=False)
        trans[i, succ] += rng.dirichlet(np.ones(6)) * 10
    cum = np.cumsum(trans / trans.sum(1, keepdims=True), axis=1)
    parts, total = [], 0
    while total < n_chars:
        r = rng.random()
        if r < 0.5:
            doc = _text_doc(rng, lexicon, cum, int(rng.integers(8, 40)))
        elif r < 0.75:
            doc = _recall_doc(rng, int(rng.integers(3, 9)))
        else:
            doc = _copy_doc(rng)
        parts.append(doc)
        total += len(doc)
    return b"".join(parts)[:n_chars]


def load_corpus(n_chars: int = DEFAULT_CHARS, seed: int = CORPUS_SEED, val_fraction: float = 0.05) -> Corpus:
    raw = np.frombuffer(_generate(n_chars, seed), dtype=np.uint8)
    cut = int(len(raw) * (1.0 - val_fraction))
    return Corpus(raw[:cut], raw[cut:])
