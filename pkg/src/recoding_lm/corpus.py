"""Corpus ingestion: vocabularies, id streams and contiguous LM batching.

Corpus files are UTF-8 text with one whitespace-tokenized sentence per line.
Vocabulary files hold one token per line; the line number is the id.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
EOS = "<eos>"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    unk_id: int
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.id_to_token)})
        if len(self._index) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")
        if self.unk_id == self.eos_id:
            raise CorpusError("unk and eos ids must differ")
        if self.id_to_token[self.unk_id] != UNK or self.id_to_token[self.eos_id] != EOS:
            raise CorpusError("vocabulary is missing reserved tokens")

    @property
    def token_to_id(self) -> dict[str, int]:
        return dict(self._index)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        try:
            return cls(tokens, tokens.index(UNK), tokens.index(EOS))
        except ValueError:
            raise CorpusError("vocabulary is missing reserved tokens") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_tokens(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(line: str) -> list[str]:
    return line.split()


def read_lines(path: str | Path) -> list[list[str]]:
    """Read a corpus file into token lists, skipping blank lines."""
    with open(path, encoding="utf-8") as fh:
        return [toks for toks in (tokenize(line) for line in fh) if toks]


def _as_token_lists(lines: Iterable[Sequence[str] | str]) -> list[list[str]]:
    return [tokenize(line) if isinstance(line, str) else list(line) for line in lines]


def build_vocab(lines: Iterable[Sequence[str] | str], min_count: int = 1) -> Vocabulary:
    """Reserved tokens come first, then kept tokens by descending frequency."""
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    counts = Counter(tok for line in _as_token_lists(lines) for tok in line)
    if not counts:
        raise CorpusError("empty corpus")
    counts.pop(UNK, None)
    counts.pop(EOS, None)
    kept = sorted((tok for tok, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary((UNK, EOS, *kept), unk_id=0, eos_id=1)


def encode(lines: Iterable[Sequence[str] | str], vocab: Vocabulary) -> np.ndarray:
    ids: list[int] = []
    for line in _as_token_lists(lines):
        ids.extend(vocab.id_of(tok) for tok in line)
        ids.append(vocab.eos_id)
    return np.asarray(ids, dtype=np.int64)


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[list[str]]:
    """Split an id stream back into sentences at eos markers (markers kept)."""
    lines: list[list[str]] = []
    current: list[str] = []
    for i in ids:
        current.append(vocab.id_to_token[int(i)])
        if int(i) == vocab.eos_id:
            lines.append(current)
            current = []
    if current:
        lines.append(current)
    return lines


@dataclass(frozen=True)
class BatchedCorpus:
    """``data`` and ``targets`` have shape ``(num_chunks, batch_size, seq_len)``."""

    data: np.ndarray
    targets: np.ndarray
    batch_size: int
    seq_len: int

    @property
    def num_chunks(self) -> int:
        return self.data.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.targets.size)

    def __iter__(self):
        return iter(zip(self.data, self.targets))


def batchify(ids: Sequence[int] | np.ndarray, batch_size: int, seq_len: int) -> BatchedCorpus:
    """Lay the stream out as ``batch_size`` contiguous rows cut into ``seq_len`` chunks.

    Row ``b`` continues from chunk ``i`` into chunk ``i + 1``, so carried hidden
    state lines up with the text. Tokens that do not fill a whole chunk are dropped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or seq_len < 1:
        raise CorpusError("batch_size and seq_len must be >= 1")
    if ids.size < batch_size * seq_len + 1:
        raise CorpusError(
            f"insufficient tokens: need at least {batch_size * seq_len + 1}, got {ids.size}")
    row_len = (ids.size - 1) // batch_size
    inputs = ids[: batch_size * row_len].reshape(batch_size, row_len)
    # each row's targets are the stream shifted by one; only the last row reaches the extra token
    shifted = ids[1 : batch_size * row_len + 1].reshape(batch_size, row_len)
    num_chunks = row_len // seq_len
    usable = num_chunks * seq_len
    data = inputs[:, :usable].reshape(batch_size, num_chunks, seq_len).transpose(1, 0, 2)
    targets = shifted[:, :usable].reshape(batch_size, num_chunks, seq_len).transpose(1, 0, 2)
    return BatchedCorpus(np.ascontiguousarray(data), np.ascontiguousarray(targets), batch_size, seq_len)
