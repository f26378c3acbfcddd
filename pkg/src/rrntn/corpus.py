"""Corpus ingestion: frequency-ranked vocabularies, encoding, and chunking.

Two corpus shapes are supported: line-per-sentence text (an end-of-sentence
token is appended to every line and sentence boundaries are kept) and a
single whitespace-tokenized stream with no sentence structure.

Token ids are assigned in rank order, so id = rank - 1 throughout: the most
frequent word has id 0 and rank 1. Frequency ties are broken by lexicographic
order of the surface form, which makes rebuilds deterministic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"


class EmptyCorpusError(ValueError):
    pass


class CorpusTooSmallError(ValueError):
    pass


class UnsupportedPolicyError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Immutable word table ordered by decreasing unigram frequency."""

    words: list[str]
    counts: np.ndarray  # int64, count per id
    id_of: dict[str, int]
    unk_id: int
    eos_id: int | None  # None for stream corpora

    @property
    def size(self) -> int:
        return len(self.words)

    def rank_of(self, word: str) -> int:
        """Frequency rank in [1, V]; unknown words get the unk rank."""
        return self.id_of.get(word, self.unk_id) + 1

    def freq_of(self, word: str) -> int:
        return int(self.counts[self.id_of.get(word, self.unk_id)])

    def id_for(self, word: str) -> int:
        return self.id_of.get(word, self.unk_id)

    def save(self, path) -> None:
        """Write "word<TAB>count" lines in rank order."""
        with open(path, "w", encoding="utf-8") as f:
            for word, count in zip(self.words, self.counts):
                f.write(f"{word}\t{int(count)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words: list[str] = []
        counts: list[int] = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, count = line.split("\t")
                words.append(word)
                counts.append(int(count))
        if not words:
            raise EmptyCorpusError(f"vocabulary file {path} is empty")
        id_of = {w: i for i, w in enumerate(words)}
        if UNK_TOKEN not in id_of:
            raise ValueError(f"vocabulary file {path} lacks {UNK_TOKEN}")
        return cls(
            words=words,
            counts=np.asarray(counts, dtype=np.int64),
            id_of=id_of,
            unk_id=id_of[UNK_TOKEN],
            eos_id=id_of.get(EOS_TOKEN),
        )


def build_vocab(tokens, min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Build a frequency-ranked vocabulary from a flat token stream.

    Words seen fewer than min_count times, or beyond max_size surface forms
    by rank, are folded into the unknown symbol; its rank comes from its own
    aggregate count. The unknown symbol is always present, even when nothing
    was replaced.
    """
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts = Counter(tokens)
    if not counts:
        raise EmptyCorpusError("token stream is empty")

    unk_count = counts.pop(UNK_TOKEN, 0)
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [(w, c) for w, c in items if c >= min_count]
    if max_size is not None:
        kept = kept[:max_size]
    unk_count += sum(c for w, c in items) - sum(c for w, c in kept)

    ranked = sorted(kept + [(UNK_TOKEN, unk_count)], key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked]
    id_of = {w: i for i, w in enumerate(words)}
    return Vocabulary(
        words=words,
        counts=np.asarray([c for _, c in ranked], dtype=np.int64),
        id_of=id_of,
        unk_id=id_of[UNK_TOKEN],
        eos_id=id_of.get(EOS_TOKEN),
    )


@dataclass
class EncodedSplit:
    """One corpus split: token ids plus sentence start offsets (empty for streams)."""

    ids: np.ndarray  # int64
    boundaries: np.ndarray  # int64 sentence start offsets, strictly increasing

    @property
    def has_sentences(self) -> bool:
        return self.boundaries.size > 0


@dataclass
class EncodedCorpus:
    train: EncodedSplit
    valid: EncodedSplit
    test: EncodedSplit


def encode(vocab: Vocabulary, tokens) -> EncodedSplit:
    """Encode tokens against a vocabulary; out-of-vocabulary words map to unk.

    A flat sequence of strings is treated as a stream. A sequence of token
    lists is treated as sentences: the end-of-sentence id is appended to each
    one and sentence start offsets are recorded.
    """
    tokens = list(tokens)
    if tokens and not isinstance(tokens[0], str):
        if vocab.eos_id is None:
            raise ValueError("sentence encoding needs an end-of-sentence entry in the vocabulary")
        ids: list[int] = []
        starts: list[int] = []
        for sentence in tokens:
            starts.append(len(ids))
            ids.extend(vocab.id_for(t) for t in sentence)
            ids.append(vocab.eos_id)
        return EncodedSplit(np.asarray(ids, dtype=np.int64), np.asarray(starts, dtype=np.int64))
    flat = [vocab.id_for(t) for t in tokens]
    return EncodedSplit(np.asarray(flat, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class SequenceChunk:
    """A training window: (batch, time) input ids and next-token targets.

    reset_before marks windows whose hidden state starts from zero (sentence
    starts in sentence mode, the first step in stream mode).
    """

    inputs: np.ndarray
    targets: np.ndarray
    reset_before: bool


def chunk_sentences(split: EncodedSplit, t_bptt: int) -> Iterator[SequenceChunk]:
    """Split each sentence into consecutive windows of at most t_bptt tokens.

    Targets are the inputs shifted by one position in the corpus stream, so
    the final step of a sentence predicts the next sentence's first token;
    only the very last corpus token has no target and is never an input.
    reset_before is true exactly on the first window of each sentence.
    """
    if t_bptt < 1:
        raise ValueError("t_bptt must be at least 1")
    if not split.has_sentences:
        raise UnsupportedPolicyError("split has no sentence boundaries; use chunk_stream")
    ids = split.ids
    n = len(ids)
    starts = split.boundaries
    ends = np.append(starts[1:], n)
    for lo, hi in zip(starts, ends):
        stop = min(int(hi) + 1, n)  # one token of lookahead for the last target
        span = int(stop - lo - 1)
        for off in range(0, span, t_bptt):
            a = int(lo) + off
            b = min(a + t_bptt, int(lo) + span)
            yield SequenceChunk(
                inputs=ids[a:b][None, :],
                targets=ids[a + 1 : b + 1][None, :],
                reset_before=off == 0,
            )


def chunk_stream(split: EncodedSplit, t_bptt: int, batch: int) -> Iterator[SequenceChunk]:
    """Cut the stream into `batch` contiguous lanes and yield aligned windows.

    Each step yields a (batch, t_bptt) chunk; the hidden state is carried
    across steps, so reset_before is true only on the first step. The
    trailing remainder that does not fill a whole window is dropped.
    """
    if t_bptt < 1:
        raise ValueError("t_bptt must be at least 1")
    if batch < 1:
        raise ValueError("batch must be at least 1")
    ids = split.ids
    n = len(ids)
    if n < batch * (t_bptt + 1):
        raise CorpusTooSmallError(
            f"stream of {n} tokens cannot fill batch={batch} windows of {t_bptt}"
        )
    per_lane = (n - 1) // batch
    steps = per_lane // t_bptt
    base = np.arange(batch, dtype=np.int64)[:, None] * per_lane
    for s in range(steps):
        idx = base + np.arange(s * t_bptt, (s + 1) * t_bptt, dtype=np.int64)[None, :]
        yield SequenceChunk(inputs=ids[idx], targets=ids[idx + 1], reset_before=s == 0)


def read_sentences(path) -> list[list[str]]:
    """Whitespace-tokenized lines of a line-per-sentence file; blank lines skipped."""
    sentences = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            if toks:
                sentences.append(toks)
    return sentences


def read_stream(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return f.read().split()


def sentence_token_stream(sentences: Sequence[Sequence[str]]) -> Iterator[str]:
    """Flatten sentences with the end-of-sentence token appended to each,
    matching what encode() will produce; feed this to build_vocab so the
    end-of-sentence symbol participates in frequency ranking."""
    for sentence in sentences:
        yield from sentence
        yield EOS_TOKEN


def split_stream_bytes(
    raw: bytes,
    train_bytes: int = 90_000_000,
    valid_bytes: int = 5_000_000,
    test_bytes: int = 5_000_000,
) -> tuple[list[str], list[str], list[str]]:
    """Split a byte stream at whitespace-safe boundaries near the requested sizes.

    A cut point advances past the current token so no token is ever split;
    the straddling token stays with the earlier part.
    """

    def cut(offset: int) -> int:
        while offset < len(raw) and not raw[offset : offset + 1].isspace():
            offset += 1
        return offset

    a = cut(min(train_bytes, len(raw)))
    b = cut(min(a + valid_bytes, len(raw)))
    c = cut(min(b + test_bytes, len(raw)))
    parts = (raw[:a], raw[a:b], raw[b:c])
    train, valid, test = (p.decode("utf-8").split() for p in parts)
    if not train or not valid or not test:
        raise CorpusTooSmallError("stream too small for the requested byte split")
    return train, valid, test
