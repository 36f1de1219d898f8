"""Synthetic phoneme-conditioned feature corpora.

Each phoneme owns a random unit vector; an utterance is rendered by emitting
``k`` noisy copies of the vector of every phoneme of every word. Transcripts and
word boundaries are therefore known exactly, which makes zero-shot keyword
spotting measurable without a real audiovisual corpus.

The module also provides a small artificial lexicon whose spelling maps to
pronunciation by regular rules, so that pronunciations of unseen words are
predictable from their letters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import write_features
from .manifest import ManifestRecord, write_manifest
from .phonedict import PhoneSet, PhoneticDictionary, VocabularySplit, parse_dictionary


@dataclass(frozen=True)
class PhonemeCodebook:
    vectors: dict[str, np.ndarray]
    seed: int

    @property
    def d_feat(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __getitem__(self, phone: str) -> np.ndarray:
        return self.vectors[phone]


@dataclass(frozen=True)
class SynthConfig:
    frames_per_phoneme: int = 3
    noise_sigma: float = 0.1
    words_per_utterance: tuple[int, int] = (3, 8)
    d_feat: int = 256

    def __post_init__(self):
        if self.frames_per_phoneme < 1:
            raise ValueError("frames_per_phoneme must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.words_per_utterance
        if lo < 1 or hi < lo:
            raise ValueError(f"bad words_per_utterance range {self.words_per_utterance}")


@dataclass
class SynthVideo:
    features: np.ndarray
    transcript: list[str]
    boundaries: list[tuple[int, int]]


def build_codebook(phones: PhoneSet | Sequence[str], d_feat: int, seed: int) -> PhonemeCodebook:
    if d_feat < 2:
        raise ValueError("d_feat must be >= 2")
    symbols = phones.symbols if isinstance(phones, PhoneSet) else tuple(phones)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((len(symbols), d_feat))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return PhonemeCodebook({s: raw[i].astype(np.float32) for i, s in enumerate(symbols)}, seed)


def synthesize_utterance(words: Sequence[str], dictionary: PhoneticDictionary, codebook: PhonemeCodebook,
                         cfg: SynthConfig, rng: np.random.Generator) -> SynthVideo:
    k = cfg.frames_per_phoneme
    rows = []
    boundaries = []
    start = 0
    for w in words:
        entry = dictionary.get(w)
        if entry is None:
            raise ValueError(f"word {w!r} is not in the dictionary")
        for ph in entry.phonemes:
            rows.append(np.repeat(codebook[ph][None, :], k, axis=0))
        n = k * entry.phoneme_count
        boundaries.append((start, start + n - 1))
        start += n
    clean = np.concatenate(rows, axis=0) if rows else np.zeros((0, codebook.d_feat), np.float32)
    noise = rng.standard_normal(clean.shape) * cfg.noise_sigma if cfg.noise_sigma > 0 else 0.0
    feats = (clean + noise).astype(np.float32)
    return SynthVideo(feats, [entry_word(dictionary, w) for w in words], boundaries)


def entry_word(dictionary: PhoneticDictionary, w: str) -> str:
    return dictionary[w].word


@dataclass(frozen=True)
class CorpusLayout:
    """How many utterances of each subset to render and which words to plant."""

    validation_fraction: float = 0.05
    test_fraction: float = 0.15
    n_test_words: int | None = None
    min_query_phonemes: int = 6
    planted_per_utterance: tuple[int, int] = (1, 2)


def generate_corpus(split: VocabularySplit, dictionary: PhoneticDictionary, n_utterances: int,
                    cfg: SynthConfig, seed: int, out_dir: str | Path,
                    layout: CorpusLayout = CorpusLayout(), codebook_seed: int | None = None) -> list[ManifestRecord]:
    """Render a corpus and write ``features/*.lspf`` plus ``manifest.tsv``.

    Training utterances draw only from ``split.train``. Validation and test
    utterances mix training filler words with planted validation/test words
    that have at least ``layout.min_query_phonemes`` phonemes.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if not split.train:
        raise ValueError("the training vocabulary is empty")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    codebook = build_codebook(dictionary.phones, cfg.d_feat, seed if codebook_seed is None else codebook_seed)

    def plant_pool(words):
        pool = sorted(w for w in words if w in dictionary and dictionary[w].phoneme_count >= layout.min_query_phonemes)
        return pool

    test_pool = plant_pool(split.test)
    if layout.n_test_words is not None:
        test_pool = [test_pool[i] for i in sorted(rng.permutation(len(test_pool))[:layout.n_test_words])]
    val_pool = plant_pool(split.validation)
    n_val = round(n_utterances * layout.validation_fraction) if val_pool else 0
    n_test = round(n_utterances * layout.test_fraction) if test_pool else 0
    n_train = n_utterances - n_val - n_test
    if n_train < 1:
        raise ValueError("no utterances left for training")

    train_words = sorted(w for w in split.train if w in dictionary)
    lo, hi = cfg.words_per_utterance
    records = []
    subsets = [("train", n_train, None), ("validation", n_val, val_pool), ("test", n_test, test_pool)]
    for subset, count, pool in subsets:
        for i in range(count):
            n_words = int(rng.integers(lo, hi + 1))
            words = [train_words[j] for j in rng.integers(0, len(train_words), size=n_words)]
            if pool:
                n_plant = min(n_words, int(rng.integers(layout.planted_per_utterance[0], layout.planted_per_utterance[1] + 1)))
                # cycling guarantees every pool word is planted at least once when count >= len(pool)
                planted = [pool[i % len(pool)]] + [pool[j] for j in rng.integers(0, len(pool), size=n_plant - 1)]
                slots = rng.choice(n_words, size=n_plant, replace=False)
                for slot, w in zip(slots, planted):
                    words[int(slot)] = w
            video = synthesize_utterance(words, dictionary, codebook, cfg, rng)
            vid = f"{subset}_{i:05d}"
            rel = Path("features") / f"{vid}.lspf"
            write_features(out_dir / rel, video.features)
            records.append(ManifestRecord(vid, str(rel), video.features.shape[0], video.transcript,
                                          video.boundaries, subset, None))
    write_manifest(out_dir / "manifest.tsv", records)
    return records


# Artificial lexicon: spelling units -> phonemes. Vowels receive stress 1 on
# the first syllable and 0 elsewhere.
_ONSETS = {
    "B": "B", "D": "D", "F": "F", "G": "G", "K": "K", "L": "L", "M": "M", "N": "N", "P": "P",
    "R": "R", "S": "S", "T": "T", "V": "V", "Z": "Z", "SH": "SH", "CH": "CH", "TH": "TH",
    "PH": "F", "J": "JH", "W": "W",
}
_CODAS = {
    "B": "B", "D": "D", "G": "G", "K": "K", "L": "L", "M": "M", "N": "N", "P": "P", "R": "R",
    "S": "S", "T": "T", "SH": "SH", "CK": "K", "NG": "NG", "X": "K S",
}
_VOWELS = {"A": "AE", "E": "EH", "I": "IH", "O": "AA", "U": "AH", "EE": "IY", "OO": "UW", "OA": "OW", "AI": "EY", "OU": "AW"}


def synthetic_lexicon(n_words: int, seed: int, syllables: tuple[int, int] = (2, 4)) -> PhoneticDictionary:
    """A dictionary of pronounceable pseudo-words with rule-based pronunciations."""
    rng = np.random.default_rng(seed)
    onsets, codas, vowels = sorted(_ONSETS), sorted(_CODAS), sorted(_VOWELS)
    lines = {}
    while len(lines) < n_words:
        n_syl = int(rng.integers(syllables[0], syllables[1] + 1))
        spelling, phones = [], []
        for s in range(n_syl):
            on = onsets[rng.integers(len(onsets))]
            vo = vowels[rng.integers(len(vowels))]
            spelling += [on, vo]
            phones += [_ONSETS[on], _VOWELS[vo] + ("1" if s == 0 else "0")]
            if rng.random() < 0.4:
                co = codas[rng.integers(len(codas))]
                spelling.append(co)
                phones += _CODAS[co].split()
        word = "".join(spelling)
        lines.setdefault(word, " ".join(phones))
    return parse_dictionary(f"{w}  {p}" for w, p in sorted(lines.items()))
