"""From raw per-query outputs to the final ordered set of captioned events."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .geometry import TemporalSegment, cl_to_se
from .heads import CaptionHypothesis, CountPrediction, EventDetection
from .text import Vocabulary

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8


@dataclass
class RankingConfig:
    gamma: float = 2.0
    mu: float = 0.3

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and math.isfinite(self.mu)) or self.gamma < 0 or self.mu < 0:
            raise ValueError("gamma and mu must be finite and non-negative")


@dataclass
class CaptionedEvent:
    segment: TemporalSegment
    tokens: list[int]
    confidence: float
    query_index: int
    loc_confidence: float = 0.0


@dataclass
class DenseCaptionSet:
    video_id: str
    events: list[CaptionedEvent] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_json(self, vocab: Vocabulary, duration: float) -> list[dict]:
        return [{"sentence": vocab.decode(ev.tokens),
                 "timestamp": [ev.segment.start * duration, ev.segment.end * duration],
                 "confidence": ev.confidence} for ev in self.events]


def event_confidence(det: EventDetection | float, cap: CaptionHypothesis | Sequence[float], cfg: RankingConfig) -> float:
    """``c_loc + mu / M**gamma * sum(log p_t)`` over the caption's token probabilities."""
    c_loc = det.loc_confidence if isinstance(det, EventDetection) else float(det)
    probs = cap.token_probs if isinstance(cap, CaptionHypothesis) else list(cap)
    if not probs:
        raise ValueError("cannot score an empty caption")
    M = len(probs)
    return c_loc + cfg.mu / M ** cfg.gamma * sum(math.log(max(p, PROB_FLOOR)) for p in probs)


def select_events(detections: Sequence[EventDetection], captions: Sequence[CaptionHypothesis],
                  count: CountPrediction | int, cfg: RankingConfig, video_id: str = "") -> DenseCaptionSet:
    """Top-``N_set`` events by confidence, returned in start-time order. No NMS."""
    n_set = count.predicted_count if isinstance(count, CountPrediction) else int(count)
    n_set = max(n_set, 1)
    out = DenseCaptionSet(video_id)
    if n_set > len(detections):
        msg = f"{video_id}: predicted count {n_set} exceeds {len(detections)} queries; clamped"
        log.warning(msg)
        out.warnings.append(msg)
        n_set = len(detections)
    scored = [(event_confidence(d, c, cfg), d.query_index, d, c) for d, c in zip(detections, captions)]
    scored.sort(key=lambda x: (-x[0], x[1]))
    chosen = scored[:n_set]
    chosen.sort(key=lambda x: (x[2].segment.start, x[1]))
    out.events = [CaptionedEvent(d.segment, c.tokens, conf, qi, d.loc_confidence) for conf, qi, d, c in chosen]
    return out


def raw_outputs(model, frames: torch.Tensor) -> list[tuple[list[EventDetection], list[CaptionHypothesis], CountPrediction]]:
    """Final-layer detections, greedy captions and count prediction for each video in the batch."""
    model.eval()
    with torch.no_grad():
        out = model(frames)
        final = out.final
        probs = final.logits.sigmoid()
        count_dist = final.count_logits.softmax(-1)
        results = []
        for b in range(final.segments.shape[0]):
            dets = []
            for j in range(final.segments.shape[1]):
                s, e = final.segments[b, j].tolist()
                dets.append(EventDetection(TemporalSegment(s, max(s, e)), float(probs[b, j]), j))
            caps = model.caption_greedy(out, b).hypotheses()
            results.append((dets, caps, CountPrediction(count_dist[b].tolist())))
    return results


def predict_dense(model, frames: torch.Tensor, video_ids: Sequence[str], cfg: RankingConfig) -> list[DenseCaptionSet]:
    return [select_events(d, c, n, cfg, vid) for vid, (d, c, n) in zip(video_ids, raw_outputs(model, frames))]


def reference_proposals(model, frames: torch.Tensor) -> list[list[TemporalSegment]]:
    """Final-layer reference points read as (center, length) proposals (caption-supervised variant)."""
    model.eval()
    with torch.no_grad():
        out = model(frames)
        ref = out.final.center_length
        se = cl_to_se(ref)
    return [[TemporalSegment(s, max(s, e)) for s, e in se[b].tolist()] for b in range(se.shape[0])]


def paragraph_mode(model, frames: torch.Tensor, proposals: Sequence[TemporalSegment], video_id: str = "") -> DenseCaptionSet:
    """Caption given proposals; localization and counting are bypassed.

    Proposals beyond the model's query capacity are processed in chunks.
    Output is ordered by proposal start time.
    """
    if not proposals:
        raise ValueError("paragraph mode needs at least one proposal")
    if frames.dim() == 2:
        frames = frames[None]
    capacity = model.cfg.num_queries
    events = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(proposals), capacity):
            chunk = proposals[lo:lo + capacity]
            cl = torch.tensor([[p.center, p.length] for p in chunk], dtype=frames.dtype)[None]
            out = model.forward_proposals(frames, cl)
            caps = model.caption_greedy(out, 0).hypotheses()
            for k, (p, c) in enumerate(zip(chunk, caps)):
                conf = sum(math.log(max(x, PROB_FLOOR)) for x in c.token_probs) / len(c.token_probs)
                events.append(CaptionedEvent(p, c.tokens, conf, lo + k))
    events.sort(key=lambda ev: (ev.segment.start, ev.query_index))
    return DenseCaptionSet(video_id, events)
