"""Whitespace tokenizer and ID vocabulary for normalized LLVM IR.

Each IR line is framed as a sentence with [SEP] on both sides; adjacent lines
share a single [SEP]. A leading [CLS] gives the classifier a pooled position:

    [CLS] [SEP] tokens(line 1) [SEP] tokens(line 2) [SEP] ... [SEP]
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, MalformedSequence
from .io import write_atomic
from .preprocess import IrProgram

PAD, UNK, SEP, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[SEP]", "[CLS]")
N_SPECIAL = len(SPECIAL_TOKENS)


class Vocabulary:
    """Bijection between token strings and integer IDs.

    IDs 0-3 are the special tokens; corpus tokens follow from 4 in byte order.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        clash = set(tokens) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"special token strings in vocabulary: {sorted(clash)}")
        self.id_to_token: tuple[str, ...] = SPECIAL_TOKENS + tuple(tokens)
        self.token_to_id: dict[str, int] = {tok: i + N_SPECIAL for i, tok in enumerate(tokens)}

    @property
    def tokens(self) -> tuple[str, ...]:
        """Non-special tokens in ID order."""
        return self.id_to_token[N_SPECIAL:]

    @property
    def n_tokens(self) -> int:
        return len(self.token_to_id)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __repr__(self) -> str:
        return f"Vocabulary({self.n_tokens} tokens + {N_SPECIAL} specials)"

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.id_to_token)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        rows = text.split("\n")
        if rows and rows[-1] == "":
            rows.pop()
        if tuple(rows[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise MalformedSequence(f"vocabulary file must start with {', '.join(SPECIAL_TOKENS)}")
        return cls(rows[N_SPECIAL:])

    def save(self, path: str | os.PathLike) -> None:
        write_atomic(path, self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, "rb") as fh:
            return cls.from_text(fh.read().decode("utf-8"))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    # (start, end) per line, end exclusive, SEPs not included
    line_spans: tuple[tuple[int, int], ...]

    @property
    def length(self) -> int:
        return len(self.ids)


def build_vocab(programs: Iterable[IrProgram]) -> Vocabulary:
    seen: set[str] = set()
    for program in programs:
        for line in program.lines:
            seen.update(line.split())
    seen.difference_update(SPECIAL_TOKENS)
    if not seen:
        raise EmptyCorpus("no tokens found in corpus")
    return Vocabulary(sorted(seen, key=lambda s: s.encode("utf-8")))


def encode(program: IrProgram, vocab: Vocabulary) -> TokenSequence:
    ids = [CLS, SEP]
    spans = []
    for line in program.lines:
        start = len(ids)
        ids.extend(vocab.id_of(tok) for tok in line.split())
        spans.append((start, len(ids)))
        ids.append(SEP)
    return TokenSequence(tuple(ids), tuple(spans))


def decode(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> list[str]:
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    if len(ids) < 2 or ids[0] != CLS or ids[1] != SEP:
        raise MalformedSequence("sequence must start with [CLS] [SEP]")
    if ids[-1] != SEP:
        raise MalformedSequence("sequence must end with [SEP]")
    if any(not (0 <= i < len(vocab)) for i in ids):
        raise MalformedSequence("id outside vocabulary")
    if CLS in ids[1:] or PAD in ids:
        raise MalformedSequence("[CLS] or [PAD] inside sequence body")
    lines, current = [], []
    for i in ids[2:]:
        if i == SEP:
            lines.append(" ".join(current))
            current = []
        else:
            current.append(vocab.id_to_token[i])
    return lines


def pad_or_truncate(seq: TokenSequence | Sequence[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit a sequence to ``max_len``; truncation re-seals with a final [SEP]."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    if len(ids) > max_len:
        ids = ids[:max_len]
        ids[-1] = SEP
    n = len(ids)
    out = np.full(max_len, PAD, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return out, mask


def encode_batch(
    programs: Sequence[IrProgram], vocab: Vocabulary, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Encode programs into a padded (batch, T) id matrix and its mask.

    T is the longest encoded length in the batch, capped at ``max_len``.
    """
    seqs = [encode(p, vocab).ids for p in programs]
    width = min(max_len, max((len(s) for s in seqs), default=2))
    width = max(width, 2)
    ids = np.empty((len(seqs), width), dtype=np.int64)
    mask = np.empty((len(seqs), width), dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row], mask[row] = pad_or_truncate(s, width)
    return ids, mask
