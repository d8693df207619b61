"""Byte-level tokenization, windowed batching and synthetic corpora."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..model import DataError

PAD, BOS, EOS, UNK = 256, 257, 258, 259
VOCAB_SIZE = 260


@dataclass
class Corpus:
    ids: np.ndarray
    digest: str

    def __len__(self) -> int:
        return len(self.ids)

    def split(self, eval_tokens: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, eval) with the last ``eval_tokens`` tokens held out."""
        if eval_tokens <= 0 or eval_tokens >= len(self.ids):
            raise DataError(f"cannot hold out {eval_tokens} of {len(self.ids)} tokens")
        return self.ids[:-eval_tokens], self.ids[-eval_tokens:]


def tokenize_bytes(data: bytes | Sequence[bytes]) -> Corpus:
    """Identity byte mapping with a BOS token at the start of every document."""
    docs = [data] if isinstance(data, (bytes, bytearray)) else list(data)
    parts = []
    h = hashlib.sha256()
    for doc in docs:
        doc = bytes(doc)
        h.update(len(doc).to_bytes(8, "little"))
        h.update(doc)
        parts.append(np.array([BOS], dtype=np.int64))
        parts.append(np.frombuffer(doc, dtype=np.uint8).astype(np.int64))
    ids = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return Corpus(ids, h.hexdigest())


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    return ids[ids < 256].astype(np.uint8).tobytes()


def num_windows(n_tokens: int, seq_len: int) -> int:
    return max(0, (n_tokens - 1) // seq_len)


def windows(ids, seq_len: int) -> np.ndarray:
    """[N, seq_len + 1] windows at stride ``seq_len``; the partial tail is dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    n = num_windows(len(ids), seq_len)
    if n < 1:
        raise DataError(f"corpus of {len(ids)} tokens too short for seq_len {seq_len}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return ids[idx]


def batch_iter(corpus, seq_len: int, batch: int, seed: int = 0, shuffle: bool = True) -> Iterator[np.ndarray]:
    """One pass over the windows in batches of ``batch``; a partial last batch is dropped."""
    ids = corpus.ids if isinstance(corpus, Corpus) else corpus
    win = windows(ids, seq_len)
    order = np.random.default_rng(seed).permutation(len(win)) if shuffle else np.arange(len(win))
    for s in range(0, len(order) - batch + 1, batch):
        yield win[order[s:s + batch]]


class BatchStream:
    """Endless deterministic batches: epoch e is shuffled with seed (seed, e)."""

    def __init__(self, ids, seq_len: int, batch: int, seed: int = 0, shuffle: bool = True):
        self.win = windows(ids, seq_len)
        if len(self.win) < batch:
            raise DataError(f"{len(self.win)} windows cannot fill a batch of {batch}")
        self.batch = batch
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self._order = self._epoch_order()
        self._pos = 0

    def _epoch_order(self) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.win))
        return np.random.default_rng([self.seed, self.epoch]).permutation(len(self.win))

    def next(self) -> np.ndarray:
        if self._pos + self.batch > len(self._order):
            self.epoch += 1
            self._order = self._epoch_order()
            self._pos = 0
        out = self.win[self._order[self._pos:self._pos + self.batch]]
        self._pos += self.batch
        return out

    def __iter__(self):
        while True:
            yield self.next()


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "ta", "so", "vi", "de", "pa", "ge", "zu", "ho", "ri", "ba", "te"]


def _words(rng: np.random.Generator, n: int) -> list[str]:
    out, seen = [], set()
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(1, 4)))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def pattern_text(n_bytes: int, seed: int = 0, n_templates: int = 16) -> bytes:
    """Lines drawn uniformly from a small fixed set of sentences.

    After the first couple of bytes of a line the rest is determined, so a
    small model can push per-byte loss far below 1 nat.
    """
    rng = np.random.default_rng(seed)
    vocab = _words(rng, 48)
    lines = []
    for _ in range(n_templates):
        lines.append(" ".join(rng.choice(vocab, size=rng.integers(4, 8))) + ".\n")
    chunks, size = [], 0
    while size < n_bytes:
        line = lines[rng.integers(n_templates)]
        chunks.append(line)
        size += len(line)
    return "".join(chunks).encode()[:n_bytes]


def markov_text(n_bytes: int, seed: int = 0, n_words: int = 256, fanout: int = 6) -> bytes:
    """Word-bigram text: each word has a few Zipf-weighted successors."""
    rng = np.random.default_rng(seed)
    vocab = _words(rng, n_words)
    succ = rng.integers(0, n_words, size=(n_words, fanout))
    w = 1.0 / np.arange(1, fanout + 1)
    probs = w / w.sum()
    out, size = [], 0
    cur = int(rng.integers(n_words))
    cdf = np.cumsum(probs)
    while size < n_bytes:
        word = vocab[cur]
        if rng.random() < 0.08:
            word += ".\n"
        else:
            word += " "
        out.append(word)
        size += len(word)
        cur = int(succ[cur, min(np.searchsorted(cdf, rng.random()), fanout - 1)])
    return "".join(out).encode()[:n_bytes]


SYNTHETIC = {"pattern": pattern_text, "markov": markov_text}


def synthetic_corpus(kind: str = "markov", n_bytes: int = 1 << 18, seed: int = 0) -> Corpus:
    if kind not in SYNTHETIC:
        raise DataError(f"unknown synthetic corpus {kind!r}; choose from {sorted(SYNTHETIC)}")
    return tokenize_bytes(SYNTHETIC[kind](n_bytes, seed))
