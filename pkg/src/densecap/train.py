"""Training loop: set-prediction loss with Adam, per-epoch validation and
best-by-F1 checkpointing. Resuming from ``last.pt`` continues the same run."""
from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import read_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Corpus, VideoSample
from .geometry import se_to_cl
from .inference import RankingConfig, predict_dense
from .matching import VideoTarget, hungarian, match_cost, set_loss
from .metrics import localization_scores
from .model import DenseCaptioner
from .text import EOS

log = logging.getLogger(__name__)


class CorpusMismatchError(ValueError):
    pass


def set_determinism(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def collate(samples: Sequence[VideoSample]) -> tuple[torch.Tensor, list[VideoTarget]]:
    frames = torch.stack([s.frames for s in samples])
    return frames, [VideoTarget(s.segments, s.captions) for s in samples]


def augment(frames: torch.Tensor, targets: list[VideoTarget], noise: float, flip: float,
            generator: torch.Generator, crop: float = 0.0) -> tuple[torch.Tensor, list[VideoTarget]]:
    """Training-time jitter: random time reversal, random background crop and
    additive Gaussian noise. The crop keeps every event whole, so captions and
    the event count are unchanged."""
    if flip > 0 or crop > 0:
        frames = frames.clone()
        T = frames.shape[1]
        flips = torch.rand(len(targets), generator=generator) < flip
        crops = torch.rand(len(targets), generator=generator) < crop
        out = []
        for b, t in enumerate(targets):
            if flips[b]:
                frames[b] = frames[b].flip(0)
                t = VideoTarget((1.0 - t.segments.flip(-1)).clamp(0, 1), t.captions)
            if crops[b] and t.num_events:
                u = torch.rand(2, generator=generator, dtype=frames.dtype)
                lo = u[0] * t.segments[:, 0].min()
                hi = t.segments[:, 1].max() + u[1] * (1 - t.segments[:, 1].max())
                if hi - lo > 1.0 / T:
                    x = ((lo + (torch.arange(T, dtype=frames.dtype) + 0.5) / T * (hi - lo)) * T - 0.5).clamp(0, T - 1)
                    i0 = x.floor().long().clamp(max=T - 2)
                    w = (x - i0)[:, None]
                    i1 = (i0 + 1).clamp(max=T - 1)
                    frames[b] = frames[b, i0] * (1 - w) + frames[b, i1] * w
                    t = VideoTarget(((t.segments - lo) / (hi - lo)).clamp(0, 1), t.captions)
            out.append(t)
        targets = out
    if noise > 0:
        frames = frames + noise * torch.randn(frames.shape, generator=generator, dtype=frames.dtype)
    return frames, targets


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_score: float = float("-inf")  # val F1, or minus the mean training loss without a val split
    best_path: Path | None = None
    last_path: Path | None = None


def paragraph_loss(model: DenseCaptioner, frames: torch.Tensor, targets: Sequence[VideoTarget]):
    """Caption loss with ground-truth segments as proposals, summed over decoder layers."""
    G = max(t.num_events for t in targets)
    B = len(targets)
    props = torch.zeros(B, G, 2)
    pad = torch.ones(B, G, dtype=torch.bool)
    for b, t in enumerate(targets):
        props[b, :t.num_events] = se_to_cl(t.segments)
        pad[b, :t.num_events] = False
    out = model.forward_proposals(frames, props, pad)
    b_idx = torch.tensor([b for b, t in enumerate(targets) for _ in range(t.num_events)], dtype=torch.long)
    q_idx = torch.tensor([g for t in targets for g in range(t.num_events)], dtype=torch.long)
    width = max(t.captions.shape[1] for t in targets)
    caps = torch.cat([F.pad(t.captions, (0, width - t.captions.shape[1])) for t in targets])
    total = frames.new_zeros(())
    cap_sum = 0.0
    for layer in range(len(out.layers)):
        logp = model.caption_logprobs(out, layer, b_idx, q_idx, caps)
        mask = (caps != 0).to(logp.dtype)
        term = (-(logp * mask).sum(-1) / mask.sum(-1)).mean()
        total = total + term
        cap_sum += float(term.detach())
    return total, {"giou": 0.0, "cls": 0.0, "ec": 0.0, "cap": cap_sum}


def compute_loss(model: DenseCaptioner, cfg: RunConfig, frames, targets):
    if cfg.paragraph:
        return paragraph_loss(model, frames, targets)
    out = model(frames)
    weak = cfg.weak_supervision
    result = set_loss(out.layers, targets, cfg.loss, cfg.matcher, model.scorer(out),
                      by_caption=weak, use_giou=not weak)
    return result.total, result.components


@torch.no_grad()
def validate(model: DenseCaptioner, cfg: RunConfig, corpus: Corpus, ids: Sequence[str], batch: int = 50) -> dict:
    """Localization F1 and counter accuracy on ``ids``; dense mode only."""
    if not ids or cfg.paragraph:
        return {}
    rank = RankingConfig(cfg.ranking.gamma, cfg.ranking.mu)
    preds, gts = {}, {}
    correct = 0
    for lo in range(0, len(ids), batch):
        chunk = [corpus.sample(v) for v in ids[lo:lo + batch]]
        frames, _ = collate(chunk)
        for s, dcs in zip(chunk, predict_dense(model, frames, [s.video_id for s in chunk], rank)):
            preds[s.video_id] = [(e.segment.start, e.segment.end) for e in dcs.events]
            gts[s.video_id] = [tuple(x) for x in s.segments.tolist()]
            correct += len(dcs.events) == min(len(gts[s.video_id]), cfg.model.max_count)
    loc = localization_scores(preds, gts)
    model.train()
    return {"f1": loc["f1"], "avg_recall": loc["avg_recall"], "avg_precision": loc["avg_precision"],
            "count_accuracy": correct / len(ids)}


class Trainer:
    def __init__(self, cfg: RunConfig, corpus: Corpus | None = None, run_dir: str | Path | None = None,
                 init_checkpoint: str | Path | None = None):
        self.cfg = cfg
        set_determinism(cfg.seed, cfg.deterministic)
        self.corpus = corpus or Corpus(cfg.data_dir, cfg.model.T)
        self.run_dir = Path(run_dir or cfg.run_dir)
        self.model = DenseCaptioner(cfg.model, self.corpus.c_in, len(self.corpus.vocab),
                                    weak=cfg.weak_supervision, paragraph=cfg.paragraph)
        if init_checkpoint is not None:
            payload = self._compatible(init_checkpoint)
            missing, unexpected = self.model.load_state_dict(payload["state_dict"], strict=False)
            log.info("initialized from %s (missing %d, unexpected %d)", init_checkpoint, len(missing), len(unexpected))
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.step = 0
        self.result = TrainResult()

    def _compatible(self, path) -> dict:
        payload = read_checkpoint(path)
        if payload["vocab"] != self.corpus.vocab.itos:
            raise CorpusMismatchError(f"{path}: vocabulary differs from corpus {self.corpus.root}")
        if payload["model_meta"]["c_in"] != self.corpus.c_in:
            raise CorpusMismatchError(
                f"{path}: feature width {payload['model_meta']['c_in']} != corpus {self.corpus.c_in}")
        return payload

    def train_state(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "best_score": self.result.best_score,
                "rng_state": self.generator.get_state(), "torch_rng_state": torch.get_rng_state(),
                "history": self.result.history}

    def resume(self, path: str | Path) -> None:
        payload = self._compatible(path)
        self.model.load_state_dict(payload["state_dict"])
        if payload["optimizer"] is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        st = payload["train_state"] or {}
        self.epoch = st.get("epoch", 0)
        self.step = st.get("step", 0)
        self.result.best_score = st.get("best_score", float("-inf"))
        self.result.history = list(st.get("history", []))
        if "rng_state" in st:
            self.generator.set_state(st["rng_state"])
        if "torch_rng_state" in st:
            torch.set_rng_state(st["torch_rng_state"])

    def _lr_for_epoch(self, epoch: int) -> float:
        drop = self.cfg.optim.lr_drop_epoch
        return self.cfg.optim.lr * (0.1 if drop is not None and epoch >= drop else 1.0)

    def run(self, epochs: int | None = None, max_steps: int | None = None,
            on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
        """Train until ``epochs`` total epochs (default from config) or ``max_steps`` optimizer steps."""
        cfg = self.cfg
        epochs = epochs or cfg.optim.epochs
        train_ids = self.corpus.split("train")
        val_ids = self.corpus.split("val")
        bs, accum = cfg.optim.batch_size, cfg.optim.grad_accum
        self.run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(self.run_dir / "config.json")
        log_path = self.run_dir / "train_log.jsonl"
        self.model.train()
        while self.epoch < epochs:
            for g in self.optimizer.param_groups:
                g["lr"] = self._lr_for_epoch(self.epoch)
            t0 = time.time()
            order = torch.randperm(len(train_ids), generator=self.generator).tolist()
            sums = {"total": 0.0, "giou": 0.0, "cls": 0.0, "ec": 0.0, "cap": 0.0}
            n_batches = 0
            self.optimizer.zero_grad()
            for i in range(0, len(order), bs):
                batch = [self.corpus.sample(train_ids[j]) for j in order[i:i + bs]]
                frames, targets = augment(*collate(batch), cfg.optim.feature_noise, cfg.optim.temporal_flip,
                                          self.generator, cfg.optim.temporal_crop)
                loss, comps = compute_loss(self.model, cfg, frames, targets)
                (loss / accum).backward()
                n_batches += 1
                if n_batches % accum == 0 or i + bs >= len(order):
                    if cfg.optim.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.optim.grad_clip)
                    self.optimizer.step()
                    self.optimizer.zero_grad()
                    self.step += 1
                value = float(loss.detach())
                self.result.step_losses.append(value)
                sums["total"] += value
                for k, v in comps.items():
                    sums[k] += v
                if max_steps is not None and self.step >= max_steps:
                    break
            self.epoch += 1
            record = {"epoch": self.epoch, "step": self.step, "seconds": round(time.time() - t0, 2),
                      **{f"loss_{k}": v / max(n_batches, 1) for k, v in sums.items()}}
            val = validate(self.model, cfg, self.corpus, val_ids)
            record.update({f"val_{k}": v for k, v in val.items()})
            self.result.history.append(record)
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
            log.info("epoch %d %s", self.epoch, record)
            score = val.get("f1", -record["loss_total"])
            if score > self.result.best_score:
                self.result.best_score = score
                self.result.best_path = save_checkpoint(self.run_dir / "best.pt", self.model, cfg, self.corpus.vocab)
            self.result.last_path = save_checkpoint(self.run_dir / "last.pt", self.model, cfg, self.corpus.vocab,
                                                    self.optimizer, self.train_state())
            if on_epoch is not None:
                on_epoch(record)
            if max_steps is not None and self.step >= max_steps:
                break
        return self.result


def train(cfg: RunConfig, resume: str | Path | None = None, init_checkpoint: str | Path | None = None,
          corpus: Corpus | None = None, **kwargs) -> TrainResult:
    trainer = Trainer(cfg, corpus=corpus, init_checkpoint=init_checkpoint)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(**kwargs)


def matched_captions(model: DenseCaptioner, corpus: Corpus, ids: Sequence[str], cfg: RunConfig,
                     paragraph: bool = False, batch: int = 50) -> list[tuple[list[int], list[int]]]:
    """(greedy caption, ground-truth caption) token lists, EOS included.

    Dense mode pairs final-layer queries with ground truth by Hungarian matching
    on the localization cost; paragraph mode captions the ground-truth segments
    directly.
    """
    model.eval()
    pairs = []

    def strip(row):
        row = row.tolist()
        return row[:row.index(EOS) + 1] if EOS in row else row

    with torch.no_grad():
        for lo in range(0, len(ids), batch):
            samples = [corpus.sample(v) for v in ids[lo:lo + batch]]
            frames, targets = collate(samples)
            if paragraph:
                for b, t in enumerate(targets):
                    out = model.forward_proposals(frames[b:b + 1], se_to_cl(t.segments)[None])
                    caps = model.caption_greedy(out, 0)
                    pairs.extend((strip(caps.tokens[g]), strip(t.captions[g])) for g in range(t.num_events))
                continue
            out = model(frames)
            final = out.final
            for b, t in enumerate(targets):
                cost = match_cost(final.segments[b], final.logits[b].sigmoid(), t.segments,
                                  cfg.matcher.alpha_giou, cfg.matcher.alpha_cls,
                                  cfg.loss.focal_alpha, cfg.loss.focal_gamma)
                caps = model.caption_greedy(out, b)
                pairs.extend((strip(caps.tokens[q]), strip(t.captions[g])) for q, g in hungarian(cost.numpy()).pairs)
    return pairs


def matched_token_accuracy(model: DenseCaptioner, corpus: Corpus, ids: Sequence[str], cfg: RunConfig,
                           paragraph: bool = False, batch: int = 50) -> float:
    """Position-wise agreement between greedy and ground-truth captions over all
    ground-truth token positions (EOS included); pairs as in :func:`matched_captions`."""
    hits = total = 0
    for pred, gt in matched_captions(model, corpus, ids, cfg, paragraph, batch):
        hits += sum(p == g for p, g in zip(pred, gt))
        total += len(gt)
    return hits / total if total else 0.0
