"""Top-level operations shared by the HTTP service and the command line."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import load_model
from .config import RunConfig
from .data import load_annotations
from .features import FrameFeatureSequence, read_feature_file, rescale_temporal
from .geometry import TemporalSegment
from .inference import RankingConfig, paragraph_mode, predict_dense
from .metrics import EvalReport, evaluate
from .synth import generate_corpus
from .train import train

CACHE_ENV = "DENSECAP_CACHE_DIR"


def cache_dir() -> Path:
    """Where generated corpora and runs go when a path is relative; ``$DENSECAP_CACHE_DIR`` or cwd."""
    return Path(os.environ.get(CACHE_ENV, "."))


def resolve(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else cache_dir() / p


def run_generate(cfg: RunConfig, output: str | Path | None = None) -> dict:
    return generate_corpus(resolve(output or cfg.data_dir), cfg.synth, seed=cfg.seed)


def run_train(cfg: RunConfig, resume: str | None = None, init_checkpoint: str | None = None) -> dict:
    cfg = cfg.model_copy(update={"data_dir": str(resolve(cfg.data_dir)), "run_dir": str(resolve(cfg.run_dir))})
    result = train(cfg, resume=resume, init_checkpoint=init_checkpoint)
    return {"best_checkpoint": str(result.best_path) if result.best_path else None,
            "last_checkpoint": str(result.last_path) if result.last_path else None,
            "best_val_f1": max((h["val_f1"] for h in result.history if "val_f1" in h), default=None),
            "epochs": len(result.history),
            "final": result.history[-1] if result.history else {}}


def feature_files(path: str | Path) -> list[Path]:
    """A feature file, a directory of them, or a corpus directory with a ``features/`` child."""
    p = Path(path)
    if p.is_dir():
        if (p / "features").is_dir():
            p = p / "features"
        files = sorted(p.glob("*.bin"))
        if not files:
            raise FileNotFoundError(f"no .bin feature files under {p}")
        return files
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    if not stem.with_suffix(".bin").exists():
        raise FileNotFoundError(f"feature file {stem.with_suffix('.bin')} not found")
    return [stem]


def load_proposals(data: Mapping[str, Any]) -> dict[str, list[tuple[float, float]]]:
    """``{video_id: [[start, end], ...]}`` in seconds; annotation-style ``{"timestamps": ...}`` entries also work."""
    out = {}
    for vid, item in data.items():
        stamps = item["timestamps"] if isinstance(item, Mapping) else item
        out[vid] = [(float(s), float(e)) for s, e in stamps]
    return out


def _to_segment(start: float, end: float, duration: float) -> TemporalSegment:
    s = min(max(start / duration, 0.0), 1.0)
    e = min(max(end / duration, 0.0), 1.0)
    return TemporalSegment(s, max(s, e))


def predict_sequences(checkpoint: str | Path, sequences: Sequence[FrameFeatureSequence],
                      proposals: Mapping[str, list[tuple[float, float]]] | None = None,
                      batch: int = 32) -> dict:
    """Prediction JSON for already-loaded feature sequences.

    With ``proposals`` the paragraph path is used: the given segments (in seconds)
    are captioned and no localization or counting happens.
    """
    model, cfg, vocab = load_model(checkpoint)
    for seq in sequences:
        if seq.features.shape[1] != model.c_in:
            raise ValueError(f"{seq.video_id}: feature width {seq.features.shape[1]} != model {model.c_in}")
    rank = RankingConfig(cfg.ranking.gamma, cfg.ranking.mu)
    results: dict[str, list[dict]] = {}
    warnings: list[str] = []

    def frames_of(seqs):
        return torch.from_numpy(np.stack([rescale_temporal(s, cfg.model.T) for s in seqs]).astype(np.float32))

    if proposals is not None:
        for seq in sequences:
            if seq.video_id not in proposals or not proposals[seq.video_id]:
                raise ValueError(f"{seq.video_id}: no proposals given")
            segs = [_to_segment(s, e, seq.duration_seconds) for s, e in proposals[seq.video_id]]
            dcs = paragraph_mode(model, frames_of([seq]), segs, seq.video_id)
            results[seq.video_id] = dcs.to_json(vocab, seq.duration_seconds)
    else:
        for lo in range(0, len(sequences), batch):
            chunk = list(sequences[lo:lo + batch])
            for seq, dcs in zip(chunk, predict_dense(model, frames_of(chunk), [s.video_id for s in chunk], rank)):
                results[seq.video_id] = dcs.to_json(vocab, seq.duration_seconds)
                warnings.extend(dcs.warnings)
    return {"mode": "paragraph" if proposals is not None else "dense", "results": results, "warnings": warnings}


def run_predict(checkpoint: str | Path, features: str | Path, proposals: str | Path | None = None,
                video_ids: Sequence[str] | None = None) -> dict:
    files = feature_files(features)
    seqs = [read_feature_file(f) for f in files]
    if video_ids:
        wanted = set(video_ids)
        seqs = [s for s in seqs if s.video_id in wanted]
    props = load_proposals(json.loads(Path(proposals).read_text())) if proposals is not None else None
    if props is not None:
        seqs = [s for s in seqs if s.video_id in props]
        if not seqs:
            raise ValueError("no feature file matches a video in the proposals file")
    return predict_sequences(checkpoint, seqs, props)


def run_evaluate(predictions: str | Path | Mapping, annotations: str | Path | Sequence[str | Path]) -> EvalReport:
    preds = json.loads(Path(predictions).read_text()) if isinstance(predictions, (str, Path)) else predictions
    paths = [annotations] if isinstance(annotations, (str, Path)) else list(annotations)
    sets = [load_annotations(p) for p in paths]
    return evaluate(preds, sets if len(sets) > 1 else sets[0])
