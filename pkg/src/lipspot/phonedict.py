"""Pronunciation dictionary parsing, alphabets and vocabulary splits.

The input is the CMU dictionary text format::

    ;;; comment
    FINISH  F IH1 N IH0 SH
    A  AH0
    A(2)  EY1

Alternate pronunciations (``WORD(2)``) are merged under the base word. The first
pronunciation of a word is its canonical one.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

PHONEME_RE = re.compile(r"^[A-Z]+[0-2]?$")
_ALT_RE = re.compile(r"^(.*)\((\d+)\)$")

PAD = "<pad>"
SOS = "<s>"
EOS = "</s>"


class DictionaryParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class PhoneSet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate phoneme symbols")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def index(self, sym: str) -> int:
        return self._index[sym]

    def encode(self, phones: Sequence[str]) -> list[int]:
        return [self._index[p] for p in phones]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass(frozen=True)
class GraphemeSet:
    """Grapheme alphabet; special tokens are indexed after the regular symbols."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate grapheme symbols")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("graphemes must be single characters")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "GraphemeSet":
        chars = set()
        for w in words:
            chars.update(w)
        return cls(tuple(sorted(chars)))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad(self) -> int:
        return len(self.symbols)

    @property
    def sos(self) -> int:
        return len(self.symbols) + 1

    @property
    def eos(self) -> int:
        return len(self.symbols) + 2

    @property
    def specials(self) -> tuple[str, str, str]:
        return (PAD, SOS, EOS)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index


@dataclass(frozen=True)
class DictEntry:
    word: str
    pronunciations: tuple[tuple[str, ...], ...]

    @property
    def phonemes(self) -> tuple[str, ...]:
        return self.pronunciations[0]

    @property
    def phoneme_count(self) -> int:
        return len(self.pronunciations[0])


@dataclass(frozen=True)
class PhoneticDictionary:
    entries: Mapping[str, DictEntry]
    phones: PhoneSet

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return canonical_word(word) in self.entries

    def __getitem__(self, word: str) -> DictEntry:
        return self.entries[canonical_word(word)]

    def __iter__(self):
        return iter(self.entries)

    def words(self) -> list[str]:
        return list(self.entries)

    def get(self, word: str) -> DictEntry | None:
        return self.entries.get(canonical_word(word))

    def graphemes(self) -> GraphemeSet:
        return GraphemeSet.from_words(self.entries)

    def subset(self, words: Iterable[str]) -> "PhoneticDictionary":
        keep = {w: self.entries[w] for w in words if w in self.entries}
        return PhoneticDictionary(keep, self.phones)


@dataclass(frozen=True)
class VocabularySplit:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    ratios: tuple[float, float, float] = (0.75, 0.05, 0.20)
    seed: int = 0

    def all_words(self) -> frozenset[str]:
        return self.train | self.validation | self.test

    def write(self, prefix: str | Path) -> dict[str, Path]:
        """Write ``<prefix>.train``, ``<prefix>.valid`` and ``<prefix>.test``."""
        out = {}
        for suffix, words in (("train", self.train), ("valid", self.validation), ("test", self.test)):
            path = Path(f"{prefix}.{suffix}")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(w + "\n" for w in sorted(words)), encoding="utf-8")
            out[suffix] = path
        return out

    @classmethod
    def read(cls, prefix: str | Path) -> "VocabularySplit":
        sets = []
        for suffix in ("train", "valid", "test"):
            text = Path(f"{prefix}.{suffix}").read_text(encoding="utf-8")
            sets.append(frozenset(line.strip() for line in text.splitlines() if line.strip()))
        return cls(*sets)


def canonical_word(word: str) -> str:
    word = word.strip().upper()
    m = _ALT_RE.match(word)
    if m:
        word = m.group(1)
    return word


def parse_dictionary(stream: TextIO | Iterable[str]) -> PhoneticDictionary:
    prons: dict[str, list[tuple[str, ...]]] = {}
    seen_phones: dict[str, None] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith(";;;"):
            continue
        fields = line.split()
        if len(fields) < 2:
            raise DictionaryParseError(lineno, f"expected a word and at least one phoneme, got {line!r}")
        word = canonical_word(fields[0])
        if not word:
            raise DictionaryParseError(lineno, "empty headword")
        phones = tuple(fields[1:])
        for p in phones:
            if not PHONEME_RE.match(p):
                raise DictionaryParseError(lineno, f"unknown phoneme symbol {p!r}")
            seen_phones.setdefault(p)
        prons.setdefault(word, []).append(phones)
    entries = {w: DictEntry(w, tuple(ps)) for w, ps in prons.items()}
    return PhoneticDictionary(entries, PhoneSet(tuple(sorted(seen_phones))))


def load_dictionary(path: str | Path) -> PhoneticDictionary:
    # the CMU file ships as latin-1
    with open(path, encoding="latin-1") as f:
        return parse_dictionary(f)


def write_dictionary(path: str | Path, dictionary: PhoneticDictionary) -> None:
    """Write one ``WORD  P1 P2 ...`` line per pronunciation, CMU style."""
    lines = []
    for word in sorted(dictionary.entries):
        for i, pron in enumerate(dictionary.entries[word].pronunciations):
            head = word if i == 0 else f"{word}({i})"
            lines.append(f"{head}  {' '.join(pron)}\n")
    Path(path).write_text("".join(lines), encoding="latin-1")


def filter_by_min_phonemes(dictionary: PhoneticDictionary, n_p: int) -> PhoneticDictionary:
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    keep = {w: e for w, e in dictionary.entries.items() if e.phoneme_count >= n_p}
    return PhoneticDictionary(keep, dictionary.phones)


def split_vocabulary(
    dictionary: PhoneticDictionary | Iterable[str],
    ratios: Sequence[float] = (0.75, 0.05, 0.20),
    seed: int = 0,
) -> VocabularySplit:
    """Randomly partition the dictionary words into train/validation/test.

    Validation and test get ``round(n * ratio)`` words; the train set absorbs
    the remainder.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {tuple(ratios)}")
    words = sorted(dictionary.entries if isinstance(dictionary, PhoneticDictionary) else set(dictionary))
    if not words:
        raise ValueError("cannot split an empty dictionary")
    n = len(words)
    n_val = round(n * ratios[1])
    n_test = round(n * ratios[2])
    if n_val + n_test > n:
        n_test = n - n_val
    random.Random(seed).shuffle(words)
    test = frozenset(words[:n_test])
    val = frozenset(words[n_test:n_test + n_val])
    train = frozenset(words[n_test + n_val:])
    return VocabularySplit(train, val, test, tuple(float(r) for r in ratios), seed)


def move_unused_to_test(split: VocabularySplit, used_words: Iterable[str]) -> VocabularySplit:
    """Move train/validation words that never occur in the training transcripts to test."""
    used = {canonical_word(w) for w in used_words}
    moved = {w for w in split.train | split.validation if w not in used}
    return VocabularySplit(
        split.train - moved, split.validation - moved, split.test | moved, split.ratios, split.seed
    )


def encode_word(word: str, gset: GraphemeSet) -> list[int]:
    out = []
    for ch in word:
        if ch in gset:
            out.append(gset._index[ch])
        elif ch.upper() in gset:
            out.append(gset._index[ch.upper()])
        else:
            raise EncodingError(f"character {ch!r} of {word!r} is not in the grapheme set")
    return out


def decode_word(ids: Iterable[int], gset: GraphemeSet) -> str:
    return "".join(gset.symbols[i] for i in ids if i < gset.size)
