"""Deterministic synthetic dense-captioning corpus.

Each event has a class and an attribute. Both are planted in the frames inside
the event as fixed signature vectors on top of Gaussian noise, and both are
named by the caption, so localization, counting and captioning are all
learnable from the features alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .data import AnnotationRecord, write_annotations
from .features import write_feature_file
from .text import Vocabulary


class InfeasibleConfigError(ValueError):
    pass


CLASSES = [
    ("chops", "the onions"),
    ("washes", "the dishes"),
    ("rides", "a bike"),
    ("plays", "the guitar"),
    ("throws", "a ball"),
    ("paints", "a wall"),
    ("reads", "a book"),
    ("lifts", "heavy weights"),
    ("pours", "some water"),
    ("waters", "the plants"),
    ("folds", "the laundry"),
    ("climbs", "a ladder"),
    ("sweeps", "the floor"),
    ("opens", "a door"),
    ("bakes", "some bread"),
    ("cleans", "a window"),
]
ATTRIBUTES = ["slowly", "quickly", "carefully"]
SUBJECTS = ["a man", "a woman", "a boy", "a girl", "the chef", "the person"]
TEMPLATES = ["{subj} {verb} {obj} {attr}", "then {subj} {verb} {obj} {attr}"]


@dataclass(frozen=True)
class SyntheticEventSpec:
    event_class: int
    attribute: int
    template: int
    subject: int
    segment: tuple[float, float]

    @property
    def caption(self) -> str:
        return realize_caption(self.event_class, self.attribute, self.template, self.subject)


def realize_caption(event_class: int, attribute: int, template: int, subject: int) -> str:
    verb, obj = CLASSES[event_class]
    return TEMPLATES[template].format(subj=SUBJECTS[subject], verb=verb, obj=obj, attr=ATTRIBUTES[attribute])


def catalog_vocabulary(num_classes: int) -> Vocabulary:
    sentences = [realize_caption(c, a, t, s) for c in range(num_classes) for a in range(len(ATTRIBUTES))
                 for t in range(len(TEMPLATES)) for s in range(len(SUBJECTS))]
    return Vocabulary.build(sentences)


def signatures(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.catalog_seed, 7919]))
    cls = rng.standard_normal((cfg.num_classes, cfg.c_in))
    attr = rng.standard_normal((len(ATTRIBUTES), cfg.c_in))
    return cls, attr


def check_feasible(cfg: SynthConfig) -> None:
    if cfg.num_classes > len(CLASSES):
        raise InfeasibleConfigError(f"at most {len(CLASSES)} classes are available")
    # even with every event at minimum length and maximal overlap they must fit in the video
    if cfg.max_events * cfg.min_length * (1 - cfg.max_overlap) > 1.0 + 1e-12:
        raise InfeasibleConfigError(
            f"{cfg.max_events} events of length >= {cfg.min_length} cannot fit with overlap <= {cfg.max_overlap}")


def _overlap_ok(segs, cand, max_overlap):
    for s, e in segs:
        inter = min(e, cand[1]) - max(s, cand[0])
        if inter > max_overlap * min(e - s, cand[1] - cand[0]) + 1e-12:
            return False
    return True


def sample_segments(rng: np.random.Generator, n: int, cfg: SynthConfig, attempts: int = 500) -> list[tuple[float, float]]:
    upper = min(cfg.max_length, max(cfg.min_length, 1.0 / n))
    for _ in range(attempts):
        lengths = rng.uniform(cfg.min_length, upper, size=n)
        segs: list[tuple[float, float]] = []
        for length in lengths:
            for _ in range(50):
                start = rng.uniform(0.0, 1.0 - length)
                cand = (start, start + length)
                if _overlap_ok(segs, cand, cfg.max_overlap):
                    segs.append(cand)
                    break
            else:
                break
        if len(segs) == n:
            return sorted(segs)
    raise InfeasibleConfigError(f"could not place {n} events under the overlap bound")


def generate_video(rng: np.random.Generator, cfg: SynthConfig, cls_sig, attr_sig):
    n = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    T_raw = int(rng.integers(cfg.t_raw_min, cfg.t_raw_max + 1))
    duration = round(float(rng.uniform(cfg.duration_min, cfg.duration_max)), 2)
    events = []
    for s, e in sample_segments(rng, n, cfg):
        ts = (round(s * duration, 2), round(e * duration, 2))
        events.append(SyntheticEventSpec(
            event_class=int(rng.integers(cfg.num_classes)), attribute=int(rng.integers(len(ATTRIBUTES))),
            template=int(rng.integers(len(TEMPLATES))), subject=int(rng.integers(len(SUBJECTS))),
            segment=(ts[0] / duration, ts[1] / duration)))
    frames = cfg.noise * rng.standard_normal((T_raw, cfg.c_in))
    centers = (np.arange(T_raw) + 0.5) / T_raw
    for ev in events:
        inside = (centers >= ev.segment[0]) & (centers < ev.segment[1])
        frames[inside] += cfg.signal * (cls_sig[ev.event_class] + 0.7 * attr_sig[ev.attribute])
    return frames.astype(np.float32), duration, events


def generate_corpus(out_dir: str | Path, cfg: SynthConfig, seed: int = 0) -> dict:
    """Write features, annotations, vocabulary, construction metadata and splits.

    Output is byte-identical for identical (cfg, seed).
    """
    check_feasible(cfg)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    cls_sig, attr_sig = signatures(cfg)
    vocab = catalog_vocabulary(cfg.num_classes)
    children = np.random.SeedSequence(seed).spawn(cfg.n_videos)

    records, metadata, ids = [], {}, []
    n_events = 0
    for i, child in enumerate(children):
        vid = f"v_{i:05d}"
        frames, duration, events = generate_video(np.random.default_rng(child), cfg, cls_sig, attr_sig)
        write_feature_file(out / "features", vid, frames, duration)
        records.append(AnnotationRecord(
            vid, duration, [((round(ev.segment[0] * duration, 2), round(ev.segment[1] * duration, 2)), ev.caption)
                            for ev in events]))
        metadata[vid] = [{"class": ev.event_class, "attribute": ev.attribute, "template": ev.template,
                          "subject": ev.subject} for ev in events]
        ids.append(vid)
        n_events += len(events)

    write_annotations(records, out / "annotations.json")
    vocab.save(out / "vocab.txt")
    (out / "metadata.json").write_text(json.dumps(metadata, indent=1, sort_keys=True) + "\n")
    holdout = min(cfg.holdout, max(len(ids) - 1, 0))
    splits = {"train": ids[:len(ids) - holdout], "val": ids[len(ids) - holdout:]}
    (out / "splits.json").write_text(json.dumps(splits, indent=1) + "\n")
    (out / "synth_config.json").write_text(json.dumps({"seed": seed, **cfg.model_dump()}, indent=1, sort_keys=True) + "\n")
    return {"videos": len(ids), "events": n_events, "vocab_size": len(vocab), "train": len(splits["train"]),
            "val": len(splits["val"]), "path": str(out)}
