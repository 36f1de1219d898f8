"""Dataset manifests: one tab-separated record per video.

Columns: ``video_id  feature_path  n_frames  transcript  boundaries  subset  view``.
The transcript is space-separated; boundaries are ``start:end`` pairs aligned
with the transcript (``-`` when unknown); view is ``NF``, ``MV`` or ``-``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

COLUMNS = ("video_id", "feature_path", "n_frames", "transcript", "boundaries", "subset", "view")
SUBSETS = ("pretrain", "train", "validation", "test")
VIEWS = ("NF", "MV")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    video_id: str
    feature_path: str
    n_frames: int
    transcript: list[str]
    boundaries: list[tuple[int, int]] | None
    subset: str
    view: str | None = None

    def validate(self) -> None:
        if self.subset not in SUBSETS:
            raise ManifestError(f"{self.video_id}: unknown subset {self.subset!r}")
        if self.view is not None and self.view not in VIEWS:
            raise ManifestError(f"{self.video_id}: unknown view tag {self.view!r}")
        if self.n_frames < 1:
            raise ManifestError(f"{self.video_id}: n_frames must be >= 1")
        if self.boundaries is not None:
            if len(self.boundaries) != len(self.transcript):
                raise ManifestError(f"{self.video_id}: {len(self.boundaries)} boundaries for {len(self.transcript)} words")
            for s, e in self.boundaries:
                if not 0 <= s <= e < self.n_frames:
                    raise ManifestError(f"{self.video_id}: boundary {s}:{e} outside [0, {self.n_frames - 1}]")

    def word_boundaries(self, word: str) -> list[tuple[int, int]]:
        if self.boundaries is None:
            return []
        return [b for w, b in zip(self.transcript, self.boundaries) if w == word]

    def to_line(self) -> str:
        bounds = "-" if self.boundaries is None else " ".join(f"{s}:{e}" for s, e in self.boundaries)
        return "\t".join([self.video_id, self.feature_path, str(self.n_frames), " ".join(self.transcript),
                          bounds, self.subset, self.view or "-"])


def parse_record(line: str, lineno: int = 0) -> ManifestRecord:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != len(COLUMNS):
        raise ManifestError(f"line {lineno}: expected {len(COLUMNS)} tab-separated fields, got {len(fields)}")
    vid, path, n, transcript, bounds, subset, view = fields
    try:
        n_frames = int(n)
        boundaries = None
        if bounds != "-":
            boundaries = []
            for pair in bounds.split():
                s, e = pair.split(":")
                boundaries.append((int(s), int(e)))
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None
    rec = ManifestRecord(vid, path, n_frames, transcript.split(), boundaries, subset, None if view == "-" else view)
    try:
        rec.validate()
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None
    return rec


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if lineno == 1 and line.split("\t")[0] == COLUMNS[0]:
                continue
            rec = parse_record(line, lineno)
            if rec.video_id in seen:
                raise ManifestError(f"line {lineno}: duplicate video id {rec.video_id!r}")
            seen.add(rec.video_id)
            records.append(rec)
    return records


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(COLUMNS)]
    for rec in records:
        rec.validate()
        lines.append(rec.to_line())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
