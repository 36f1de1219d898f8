"""Score (query, video) pairs with a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .manifest import ManifestRecord
from .metrics import LocalizationRecord, ScoreRecord
from .model import KWSModel


@dataclass(frozen=True)
class ScoredPair:
    query: str
    video: str
    score: float
    label: int
    t_hat: int | None

    def record(self) -> ScoreRecord:
        return ScoreRecord(self.query, self.video, self.score, self.label)


@torch.no_grad()
def score_queries(model: KWSModel, queries: Sequence[str], records: Sequence[ManifestRecord],
                  features: dict[str, np.ndarray], max_pairs: int = 2048) -> list[ScoredPair]:
    """Posterior (and localisation, with the sequence backend) for every
    query/video pair, ordered by query then video id."""
    from .training import pad_features

    was_training = model.training
    model.eval()
    try:
        queries = sorted(queries)
        records = sorted(records, key=lambda r: r.video_id)
        r_all, _ = model.embed(queries) if queries else (torch.zeros(0), None)
        results: dict[tuple[str, str], tuple[float, int | None]] = {}
        # sort by length so padded batches stay tight
        by_len = sorted(records, key=lambda r: features[r.video_id].shape[0])
        v_chunk = max(1, min(len(by_len), max_pairs // max(1, len(queries))))
        for vs in range(0, len(by_len), v_chunk):
            vrecs = by_len[vs:vs + v_chunk]
            X, lengths = pad_features([features[r.video_id] for r in vrecs])
            q_chunk = max(1, max_pairs // len(vrecs))
            for qs in range(0, len(queries), q_chunk):
                qidx = torch.arange(qs, min(len(queries), qs + q_chunk))
                pv = torch.arange(len(vrecs)).repeat(len(qidx))
                pq = qidx.repeat_interleave(len(vrecs))
                out = model.kws(X, lengths, r_all[pq], pv)
                t_hat = out.t_hat.tolist() if out.t_hat is not None else [None] * len(pv)
                for j in range(len(pv)):
                    results[(queries[int(pq[j])], vrecs[int(pv[j])].video_id)] = (float(out.p[j]), t_hat[j])
    finally:
        model.train(was_training)
    out_pairs = []
    for q in queries:
        for r in records:
            score, t = results[(q, r.video_id)]
            out_pairs.append(ScoredPair(q, r.video_id, score, int(q in r.transcript), t))
    return out_pairs


def localization_records(pairs: Sequence[ScoredPair], records: Sequence[ManifestRecord],
                         tolerance: int = 2) -> list[LocalizationRecord]:
    """Localisation records for the positive pairs whose video has word boundaries."""
    by_id = {r.video_id: r for r in records}
    out = []
    for p in pairs:
        if p.label != 1 or p.t_hat is None:
            continue
        bounds = by_id[p.video].word_boundaries(p.query)
        if bounds:
            out.append(LocalizationRecord(p.t_hat, bounds, tolerance))
    return out
