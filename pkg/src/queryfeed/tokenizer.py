"""Deterministic greedy byte-pair tokenizer for item metadata.

Vocabulary layout: five reserved tokens at ids 0-4, then merge-produced
tokens in the order they were learned, then single characters filling any
leftover budget. Everything (training, encoding) is pure and
reproducible: same corpus, same vocabulary, byte for byte.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

RESERVED = ("[Q_V]", "[Q_B]", "[TGT]", "[PAD]", "[UNK]")
QV_ID, QB_ID, TGT_ID, PAD_ID, UNK_ID = range(5)

_WORD_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class TokenizerError(ValueError):
    pass


def pre_tokenize(text: str) -> list[str]:
    """Lowercase and split into alphanumeric runs and single punctuation marks."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")
        if tuple(self.tokens[:5]) != RESERVED:
            raise TokenizerError("first five vocabulary entries must be the reserved tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]


def train_vocab(corpus, size: int) -> Vocabulary:
    """Learn a vocabulary of at most `size` entries from metadata strings.

    Greedy pair merging: at each step the most frequent adjacent symbol
    pair merges, ties broken by lexicographic pair order. Merging runs
    until the budget is spent or no adjacent pairs remain; leftover budget
    is filled with single characters by descending frequency.
    """
    corpus = list(corpus)
    if not corpus:
        raise TokenizerError("empty corpus")
    if size <= len(RESERVED):
        raise TokenizerError(f"size must exceed {len(RESERVED)} reserved slots")

    word_freq = Counter()
    for text in corpus:
        word_freq.update(pre_tokenize(text))

    # symbol sequences per word type, weighted by word frequency
    seqs = {w: list(w) for w in word_freq}
    budget = size - len(RESERVED)
    merges: list[tuple[str, str]] = []
    merged_tokens: list[str] = []

    while budget > len(merges):
        pair_counts = Counter()
        for w, seq in seqs.items():
            f = word_freq[w]
            for a, b in zip(seq, seq[1:]):
                pair_counts[(a, b)] += f
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        merged_tokens.append(best[0] + best[1])
        a, b = best
        for w, seq in seqs.items():
            if len(seq) < 2:
                continue
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out

    tokens = list(RESERVED) + merged_tokens
    if len(tokens) < size:
        char_freq = Counter()
        for w, f in word_freq.items():
            for ch in w:
                char_freq[ch] += f
        fill = sorted(char_freq, key=lambda c: (-char_freq[c], c))
        seen = set(tokens)
        for ch in fill:
            if len(tokens) >= size:
                break
            if ch not in seen:
                tokens.append(ch)
                seen.add(ch)
    return Vocabulary(tokens=tokens, merges=merges)


def _apply_merges(symbols: list[str], merges: list[tuple[str, str]]) -> list[str]:
    for a, b in merges:
        if len(symbols) < 2:
            break
        out = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return symbols


def encode(text: str, vocab: Vocabulary, max_len: int = 64) -> list[int]:
    """Token ids for `text`, truncated to max_len; unknown symbols map to [UNK]."""
    if max_len < 1:
        raise TokenizerError("max_len must be >= 1")
    ids: list[int] = []
    for word in pre_tokenize(text):
        for sym in _apply_merges(list(word), vocab.merges):
            ids.append(vocab.ids.get(sym, UNK_ID))
            if len(ids) >= max_len:
                return ids
    return ids


def decode(ids, vocab: Vocabulary) -> str:
    """Space-joined token strings; the inverse of encode up to whitespace."""
    return " ".join(vocab.token_of(i) for i in ids)


def item_metadata_text(title: str, category_path) -> str:
    """Canonical metadata string: title, pipe, category path joined by '>'."""
    if isinstance(category_path, str):
        category_path = [category_path]
    return f"{title} | {' > '.join(category_path)}"


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line, line number = id; merges appended after a blank sentinel."""
    lines = list(vocab.tokens)
    lines.append("")
    for a, b in vocab.merges:
        lines.append(f"{a}\t{b}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().split("\n")
    if raw and raw[-1] == "":
        raw = raw[:-1]
    try:
        sep = raw.index("")
    except ValueError:
        sep = len(raw)
    tokens = raw[:sep]
    merges = []
    for line in raw[sep + 1:]:
        a, _, b = line.partition("\t")
        merges.append((a, b))
    return Vocabulary(tokens=tokens, merges=merges)
