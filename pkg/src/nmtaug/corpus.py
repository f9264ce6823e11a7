"""Parallel text ingestion, joint BPE vocabulary, and padded batches.

Words are split on whitespace and segmented into subword symbols.  The final
symbol of every word carries the end-of-word marker ``</w>``, so ``low`` may
become ``lo low</w>``-style pieces and detokenization is just concatenation
with a space after each marked piece.  Merge rules are stored on the bare
symbols; a merge keeps the marker of its right-hand piece.
"""
from __future__ import annotations

import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .rng import DATA_ORDER, substream

EOW = "</w>"
PAD, UNK, BOS, EOS, SEP, CLS, MASK = range(7)
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<sep>", "<cls>", "<mask>")
MERGES_HEADER = "#version: 1"


def normalize(line: str) -> str:
    return " ".join(unicodedata.normalize("NFC", line).split())


@dataclass(frozen=True)
class SentencePair:
    source: str
    target: str

    def __post_init__(self):
        for side, text in (("source", self.source), ("target", self.target)):
            if "\n" in text or "\r" in text:
                raise DataError(f"{side} text contains a newline")
            if not text.strip():
                raise DataError(f"{side} text is empty")


def read_parallel(src_path: str | os.PathLike, tgt_path: str | os.PathLike) -> list[SentencePair]:
    with open(src_path, encoding="utf-8") as fh:
        src = fh.read().splitlines()
    with open(tgt_path, encoding="utf-8") as fh:
        tgt = fh.read().splitlines()
    if len(src) != len(tgt):
        raise DataError(f"line count mismatch: {len(src)} source vs {len(tgt)} target lines")
    pairs = []
    for lineno, (s, t) in enumerate(zip(src, tgt), start=1):
        s, t = normalize(s), normalize(t)
        if not s or not t:
            raise DataError(f"empty sentence at line {lineno}")
        pairs.append(SentencePair(s, t))
    return pairs


def write_parallel(pairs: Sequence[SentencePair], src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for p in pairs:
            fs.write(p.source + "\n")
            ft.write(p.target + "\n")


# -- BPE ---------------------------------------------------------------------


@dataclass
class MergeTable:
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise DataError("duplicate merge rule")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def __len__(self) -> int:
        return len(self.merges)

    def __eq__(self, other) -> bool:
        return isinstance(other, MergeTable) and self.merges == other.merges

    def segment(self, word: str) -> tuple[str, ...]:
        """Split one word into subword tokens (last token marked with ``</w>``)."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_symbols(symbols, best)
        symbols[-1] = symbols[-1] + EOW
        result = tuple(symbols)
        self._cache[word] = result
        return result


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    left, right = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _word_counts(lines: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in lines:
        counts.update(normalize(line).split())
    return counts


def learn_bpe(lines: Sequence[str], num_merges: int) -> MergeTable:
    """Greedily learn up to ``num_merges`` merges over word-internal symbol pairs.

    At each step the most frequent adjacent pair wins; ties go to the
    lexicographically smallest pair.  Learning stops early when no pair is
    left (every word is a single symbol).
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    counts = _word_counts(lines)
    if not counts:
        raise DataError("empty corpus")
    words = [list(w) for w in counts]
    freqs = [counts[w] for w in counts]

    stats: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for idx, (symbols, freq) in enumerate(zip(words, freqs)):
        for pair in zip(symbols, symbols[1:]):
            stats[pair] += freq
            where.setdefault(pair, set()).add(idx)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        candidates = [(pair, c) for pair, c in stats.items() if c > 0]
        if not candidates:
            break
        best = min(candidates, key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for idx in sorted(where.pop(best, ())):
            symbols, freq = words[idx], freqs[idx]
            for pair in zip(symbols, symbols[1:]):
                stats[pair] -= freq
            merged = _merge_symbols(symbols, best)
            words[idx] = merged
            for pair in zip(merged, merged[1:]):
                stats[pair] += freq
                where.setdefault(pair, set()).add(idx)
        stats.pop(best, None)
        for pair in [p for p, c in stats.items() if c <= 0]:
            del stats[pair]
    return MergeTable(merges)


def write_merges(table: MergeTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MERGES_HEADER + "\n")
        for left, right in table.merges:
            fh.write(f"{left} {right}\n")


def read_merges(path) -> MergeTable:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MERGES_HEADER:
        raise DataError(f"{path}: missing merge table header {MERGES_HEADER!r}")
    merges = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise DataError(f"{path}:{lineno}: malformed merge rule")
        merges.append((parts[0], parts[1]))
    return MergeTable(merges)


# -- vocabulary ----------------------------------------------------------------


class Vocab:
    """Bijective token <-> id map; the seven special tokens hold ids 0..6."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))


def build_vocab(lines: Iterable[str], merges: MergeTable, min_freq: int = 1) -> Vocab:
    """Specials plus every subword with frequency >= ``min_freq``.

    Ids follow descending frequency, then lexicographic order.
    """
    freq: Counter = Counter()
    for word, count in _word_counts(lines).items():
        for piece in merges.segment(word):
            freq[piece] += count
    kept = sorted((t for t, c in freq.items() if c >= min_freq), key=lambda t: (-freq[t], t))
    return Vocab(list(SPECIAL_TOKENS) + kept)


def write_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.tokens):
            fh.write(f"{tok}\t{i}\n")


def read_vocab(path) -> Vocab:
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            tok, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit() or int(idx) != lineno - 1:
                raise DataError(f"{path}:{lineno}: expected 'token<TAB>{lineno - 1}'")
            tokens.append(tok)
    return Vocab(tokens)


def tokenize(line: str, merges: MergeTable, vocab: Vocab) -> list[int]:
    """Map a line to ids.  Unknown pieces fall back to characters, then UNK."""
    ids: list[int] = []
    for word in normalize(line).split():
        for piece in merges.segment(word):
            if piece in vocab.ids:
                ids.append(vocab.ids[piece])
                continue
            bare = piece[: -len(EOW)] if piece.endswith(EOW) else piece
            chars = list(bare)
            if piece.endswith(EOW):
                chars[-1] += EOW
            ids.extend(vocab.id_of(c) for c in chars)
    return ids


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    words: list[str] = []
    current = ""
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS, SEP, CLS):
            continue
        tok = vocab.token_of(i)
        if i in (UNK, MASK):
            tok += EOW
        if tok.endswith(EOW):
            words.append(current + tok[: -len(EOW)])
            current = ""
        else:
            current += tok
    if current:
        words.append(current)
    return " ".join(words)


def merge_subwords(ids: Iterable[int], vocab: Vocab) -> list[str]:
    """Word tokens of an id sequence (subwords rejoined), as used for BLEU."""
    return detokenize(ids, vocab).split()


# -- tokenized pairs and batches ---------------------------------------------------


@dataclass(frozen=True)
class TokenizedPair:
    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(i) for i in self.x))
        object.__setattr__(self, "y", tuple(int(i) for i in self.y))
        if not self.x or not self.y:
            raise DataError("tokenized pair sides must be non-empty")
        for side in (self.x, self.y):
            if PAD in side or MASK in side:
                raise DataError("PAD/MASK ids cannot appear inside a sentence")

    def check_vocab(self, size: int) -> None:
        if max(self.x) >= size or max(self.y) >= size:
            raise DataError(f"token id outside vocabulary of size {size}")


def tokenize_pairs(pairs: Sequence[SentencePair], merges: MergeTable, vocab: Vocab) -> list[TokenizedPair]:
    return [TokenizedPair(tokenize(p.source, merges, vocab), tokenize(p.target, merges, vocab)) for p in pairs]


@dataclass
class PaddedBatch:
    x_ids: np.ndarray
    y_ids: np.ndarray
    x_len: np.ndarray
    y_len: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return int(self.x_ids.shape[0])


def pad_pairs(pairs: Sequence[TokenizedPair], indices: Sequence[int] | None = None) -> PaddedBatch:
    if indices is None:
        indices = range(len(pairs))
    chosen = [pairs[i] for i in indices]
    x_len = np.array([len(p.x) for p in chosen], dtype=np.int64)
    y_len = np.array([len(p.y) for p in chosen], dtype=np.int64)
    x_ids = np.full((len(chosen), int(x_len.max())), PAD, dtype=np.int64)
    y_ids = np.full((len(chosen), int(y_len.max())), PAD, dtype=np.int64)
    for row, p in enumerate(chosen):
        x_ids[row, : len(p.x)] = p.x
        y_ids[row, : len(p.y)] = p.y
    return PaddedBatch(x_ids, y_ids, x_len, y_len, np.asarray(list(indices), dtype=np.int64))


def make_batches(
    pairs: Sequence[TokenizedPair],
    max_tokens: int,
    rng_seed: int,
    epoch: int = 0,
    max_sentences: int | None = None,
) -> list[PaddedBatch]:
    """Shuffle, group by length, and pad so every batch holds <= ``max_tokens`` padded tokens.

    The padded size of a batch is rows x max(longest source, longest target).
    Each pair lands in exactly one batch.
    """
    lengths = np.array([max(len(p.x), len(p.y)) for p in pairs], dtype=np.int64)
    for i, n in enumerate(lengths):
        if n > max_tokens:
            raise DataError(f"pair at line {i + 1} has {n} tokens, more than max_tokens={max_tokens}")
    if not len(pairs):
        return []
    rng = substream(rng_seed, DATA_ORDER, epoch)
    order = rng.permutation(len(pairs))
    order = order[np.argsort(lengths[order], kind="stable")]

    groups: list[list[int]] = []
    current: list[int] = []
    longest = 0
    for idx in order:
        n = int(lengths[idx])
        grown = max(longest, n)
        full = max_sentences is not None and len(current) >= max_sentences
        if current and (grown * (len(current) + 1) > max_tokens or full):
            groups.append(current)
            current, grown = [], n
        current.append(int(idx))
        longest = grown
    groups.append(current)
    return [pad_pairs(pairs, groups[g]) for g in rng.permutation(len(groups))]
