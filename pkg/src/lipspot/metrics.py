"""Detection, ranking and localisation metrics for keyword spotting.

Conventions: a pair is a false alarm at threshold ``theta`` when a negative
scores strictly above ``theta``; a positive scoring at or below ``theta`` is a
miss. Frame indices are 0-based.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TOLERANCE = 2
TOP_N = (1, 2, 4, 8)


class UndefinedRateError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    query: str
    video: str
    score: float
    label: int


@dataclass(frozen=True)
class DETCurve:
    thresholds: np.ndarray
    far: np.ndarray
    mdr: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.mdr.tolist()))


@dataclass(frozen=True)
class HypothesisList:
    hypotheses: list[tuple[str, float]]
    fudge: float = 5.0


@dataclass(frozen=True)
class LocalizationRecord:
    t_hat: int
    boundaries: Sequence[tuple[int, int]]
    tolerance: int = TOLERANCE

    @property
    def correct(self) -> bool:
        return any(s - self.tolerance <= self.t_hat <= e + self.tolerance for s, e in self.boundaries)


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(records, tuple) and len(records) == 2:
        scores, labels = records
        return np.asarray(scores, dtype=float), np.asarray(labels, dtype=int)
    records = list(records)
    return (np.array([r.score for r in records], dtype=float),
            np.array([r.label for r in records], dtype=int))


def compute_det(records: Iterable[ScoreRecord] | tuple[Sequence[float], Sequence[int]]) -> DETCurve:
    """FAR and MDR at -inf, at every distinct score and at +inf (ascending)."""
    scores, labels = _arrays(records)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative record")
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    far = (neg.size - np.searchsorted(neg, thresholds, side="right")) / neg.size
    mdr = np.searchsorted(pos, thresholds, side="right") / pos.size
    return DETCurve(thresholds, far, mdr)


def compute_eer(curve: DETCurve) -> float:
    """Rate where FAR = MDR, interpolating linearly between bracketing points."""
    d = curve.far - curve.mdr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(curve.far[i])
    alpha = d[i - 1] / (d[i - 1] - d[i])
    return float(curve.far[i - 1] + alpha * (curve.far[i] - curve.far[i - 1]))


def rate_at(curve: DETCurve, far: float | None = None, mdr: float | None = None) -> float:
    """MDR at a fixed FAR, or FAR at a fixed MDR, by linear interpolation.

    Where the fixed rate is attained exactly, the best complementary rate
    among those points is returned.
    """
    if (far is None) == (mdr is None):
        raise ValueError("fix exactly one of far= or mdr=")
    if far is not None:
        x, fixed, other = far, curve.far, curve.mdr
        if not 0.0 <= x <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        i = int(np.argmax(fixed <= x))
        if fixed[i] == x or i == 0:
            return float(other[i])
        alpha = (fixed[i - 1] - x) / (fixed[i - 1] - fixed[i])
        return float(other[i - 1] + alpha * (other[i] - other[i - 1]))
    x, fixed, other = mdr, curve.mdr, curve.far
    if not 0.0 <= x <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    i = int(np.nonzero(fixed <= x)[0][-1])
    if fixed[i] == x or i == len(fixed) - 1:
        return float(other[i])
    alpha = (x - fixed[i]) / (fixed[i + 1] - fixed[i])
    return float(other[i] + alpha * (other[i + 1] - other[i]))


def topn_rates(records: Iterable[ScoreRecord], n_values: Sequence[int] = TOP_N) -> dict[int, float]:
    """Fraction of positive pairs outscored by fewer than N negatives of the same query."""
    by_query: dict[str, tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for r in records:
        by_query[r.query][0 if r.label == 1 else 1].append(r.score)
    higher = []
    for pos, neg in by_query.values():
        if not pos:
            continue
        neg_sorted = np.sort(np.asarray(neg, dtype=float))
        higher.append(neg_sorted.size - np.searchsorted(neg_sorted, np.asarray(pos, dtype=float), side="right"))
    if not higher:
        raise UndefinedRateError("no positive pairs")
    counts = np.concatenate(higher)
    return {n: float(np.mean(counts < n)) for n in n_values}


def localization_accuracy(records: Sequence[LocalizationRecord]) -> float:
    records = list(records)
    if not records:
        raise UndefinedRateError("localization accuracy of an empty record list")
    return sum(r.correct for r in records) / len(records)


def build_query_list(test_records, train_vocab: Iterable[str], dev_vocab: Iterable[str], dictionary,
                     min_phonemes: int = 6) -> list[str]:
    """Distinct test-transcript words with enough phonemes that were never
    seen in training or development. Words absent from ``dictionary`` have no
    phoneme count and are left out."""
    excluded = set(train_vocab) | set(dev_vocab)
    words = set()
    for rec in test_records:
        for w in rec.transcript:
            if w in excluded:
                continue
            entry = dictionary.get(w)
            if entry is not None and entry.phoneme_count >= min_phonemes:
                words.add(entry.word)
    return sorted(words)


def _tokens(text: str) -> set[str]:
    return {t.casefold() for t in text.split()}


def asr_keyword_posterior(hyps: HypothesisList, keyword: str) -> float:
    """Posterior mass of the N-best hypotheses that contain ``keyword``."""
    if hyps.fudge <= 0:
        raise ValueError("fudge factor must be positive")
    if not hyps.hypotheses:
        raise ValueError("empty hypothesis list")
    scaled = np.array([s for _, s in hyps.hypotheses], dtype=float) / hyps.fudge
    if not np.all(np.isfinite(scaled)):
        raise ValueError("hypothesis scores must be finite")
    w = np.exp(scaled - scaled.max())
    q = keyword.casefold()
    hit = np.array([q in _tokens(text) for text, _ in hyps.hypotheses])
    return float(w[hit].sum() / w.sum())


def detection_report(records: Sequence[ScoreRecord]) -> dict[str, float]:
    curve = compute_det(records)
    return {
        "eer": compute_eer(curve),
        "mdr_at_far_5": rate_at(curve, far=0.05),
        "mdr_at_far_1": rate_at(curve, far=0.01),
        "far_at_mdr_5": rate_at(curve, mdr=0.05),
        "far_at_mdr_1": rate_at(curve, mdr=0.01),
    }


def write_scores(path: str | Path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query", "video", "score", "label"])
        for r in records:
            w.writerow([r.query, r.video, repr(float(r.score)), int(r.label)])


def read_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["query", "video", "score", "label"]:
            raise ValueError(f"row 1: expected header query,video,score,label, got {header}")
        for rowno, row in enumerate(reader, start=2):
            try:
                q, v, s, l = row
                score, label = float(s), int(l)
                if label not in (0, 1) or not math.isfinite(score):
                    raise ValueError
            except ValueError:
                raise ValueError(f"row {rowno}: malformed score record {row}") from None
            out.append(ScoreRecord(q, v, score, label))
    return out


def write_det(path: str | Path, curve: DETCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "far", "mdr"])
        for t, a, m in curve.points():
            w.writerow([repr(t), repr(a), repr(m)])


def read_hypotheses(path: str | Path, fudge: float = 5.0) -> dict[str, HypothesisList]:
    """Parse N-best blocks: a line naming the video, then ``score<TAB>text`` lines."""
    blocks: dict[str, list[tuple[str, float]]] = {}
    current = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                current = line.strip()
                blocks[current] = []
                continue
            if current is None:
                raise ValueError(f"line {lineno}: hypothesis before any video id")
            score, text = line.split("\t", 1)
            blocks[current].append((text, float(score)))
    return {v: HypothesisList(h, fudge) for v, h in blocks.items()}
