"""Annotation files and the in-memory training corpus.

Annotation JSON mirrors the public dense-captioning layout::

    {"<video_id>": {"duration": 120.5,
                    "timestamps": [[s0, e0], [s1, e1]],
                    "sentences": ["...", "..."]}}

Timestamps are in seconds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .features import read_feature_file, rescale_temporal
from .text import PAD, Vocabulary, tokenize


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    video_id: str
    duration_seconds: float
    events: list[tuple[tuple[float, float], str]]

    def __post_init__(self):
        if not self.duration_seconds > 0:
            raise AnnotationError(f"{self.video_id}: duration must be positive")
        if not self.events:
            raise AnnotationError(f"{self.video_id}: at least one event required")
        for (s, e), _ in self.events:
            if not (0.0 <= s <= e <= self.duration_seconds):
                raise AnnotationError(f"{self.video_id}: timestamp [{s}, {e}] outside [0, {self.duration_seconds}]")

    @property
    def timestamps(self) -> list[tuple[float, float]]:
        return [ts for ts, _ in self.events]

    @property
    def sentences(self) -> list[str]:
        return [s for _, s in self.events]

    def normalized_segments(self) -> np.ndarray:
        return np.asarray(self.timestamps, dtype=np.float64).reshape(-1, 2) / self.duration_seconds

    def to_json(self) -> dict:
        return {"duration": self.duration_seconds,
                "timestamps": [list(ts) for ts in self.timestamps],
                "sentences": self.sentences}


def parse_annotations(data: dict) -> list[AnnotationRecord]:
    records = []
    for vid, entry in data.items():
        try:
            duration = float(entry["duration"])
            ts = entry["timestamps"]
            sents = entry["sentences"]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{vid}: malformed annotation entry ({exc})") from exc
        if len(ts) != len(sents):
            raise AnnotationError(f"{vid}: {len(ts)} timestamps but {len(sents)} sentences")
        try:
            events = [((float(s), float(e)), str(sent)) for (s, e), sent in zip(ts, sents)]
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{vid}: malformed timestamp ({exc})") from exc
        records.append(AnnotationRecord(vid, duration, events))
    return records


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: expected an object keyed by video id")
    return parse_annotations(data)


def annotations_to_json(records: list[AnnotationRecord]) -> dict:
    return {r.video_id: r.to_json() for r in records}


def write_annotations(records: list[AnnotationRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(records), indent=1, sort_keys=True) + "\n")


@dataclass
class VideoSample:
    video_id: str
    frames: torch.Tensor  # (T, C_in)
    duration: float
    segments: torch.Tensor  # (G, 2) normalized start/end
    captions: torch.Tensor  # (G, M) token ids, PAD-padded
    sentences: list[str] = field(default_factory=list)


def pad_token_lists(seqs: list[list[int]], width: int | None = None) -> torch.Tensor:
    width = width or max((len(s) for s in seqs), default=1)
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s[:width], dtype=torch.long)
    return out


class Corpus:
    """A corpus directory (as written by the synthetic generator) loaded for training."""

    def __init__(self, root: str | Path, T: int, vocab: Vocabulary | None = None):
        self.root = Path(root)
        self.T = T
        self.vocab = vocab or Vocabulary.load(self.root / "vocab.txt")
        self.records = {r.video_id: r for r in load_annotations(self.root / "annotations.json")}
        splits_path = self.root / "splits.json"
        if splits_path.exists():
            self.splits = json.loads(splits_path.read_text())
        else:
            self.splits = {"train": sorted(self.records), "val": []}
        self._cache: dict[str, VideoSample] = {}
        self.c_in = read_feature_file(self.feature_path(next(iter(self.records)))).features.shape[1]

    def feature_path(self, video_id: str) -> Path:
        return self.root / "features" / f"{video_id}.bin"

    def sample(self, video_id: str) -> VideoSample:
        if video_id not in self._cache:
            rec = self.records[video_id]
            seq = read_feature_file(self.feature_path(video_id))
            if seq.features.shape[1] != self.c_in:
                raise ValueError(f"{video_id}: feature width {seq.features.shape[1]} != {self.c_in}")
            frames = torch.from_numpy(rescale_temporal(seq, self.T).astype(np.float32))
            segs = torch.from_numpy(np.clip(rec.normalized_segments(), 0, 1).astype(np.float32))
            caps = pad_token_lists([tokenize(s, self.vocab) for s in rec.sentences])
            self._cache[video_id] = VideoSample(video_id, frames, rec.duration_seconds, segs, caps, rec.sentences)
        return self._cache[video_id]

    def split(self, name: str) -> list[str]:
        return list(self.splits.get(name, []))
