"""Bipartite matching between event predictions and ground truth, and the set
prediction loss summed over decoder layers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .geometry import giou_tensor, pairwise_giou

EPS = 1e-8


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    total_cost: float

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


def hungarian(cost) -> Matching:
    """Minimum-cost one-to-one assignment covering ``min(N, G)`` pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return Matching([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return Matching(pairs, float(cost[rows, cols].sum()))


def focal_loss(prob, target, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss ``-a_t (1 - p_t)^gamma log(p_t)``, elementwise on floats or tensors.

    ``alpha`` weights positives and ``1 - alpha`` negatives.
    """
    if isinstance(prob, torch.Tensor):
        p = prob.clamp(EPS, 1 - EPS)
        target = torch.as_tensor(target, dtype=p.dtype)
        p_t = torch.where(target > 0.5, p, 1 - p)
        a_t = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
        return -a_t * (1 - p_t) ** gamma * torch.log(p_t)
    p = min(max(float(prob), EPS), 1 - EPS)
    p_t, a_t = (p, alpha) if target else (1 - p, 1 - alpha)
    return -a_t * (1 - p_t) ** gamma * float(np.log(p_t))


def focal_loss_with_logits(logits: torch.Tensor, target: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Same as :func:`focal_loss` on ``sigmoid(logits)``, computed stably in log space."""
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    a_t = alpha * target + (1 - alpha) * (1 - target)
    return a_t * (1 - p_t) ** gamma * ce


def match_cost(pred_segments: torch.Tensor, pred_probs: torch.Tensor, gt_segments: torch.Tensor,
               alpha_giou: float = 2.0, alpha_cls: float = 1.0,
               focal_alpha: float = 0.25, focal_gamma: float = 2.0) -> torch.Tensor:
    """(N, G) cost ``alpha_giou * -giou + alpha_cls * focal(p, positive)``."""
    cls_cost = focal_loss(pred_probs, torch.ones_like(pred_probs), focal_alpha, focal_gamma)
    return alpha_giou * -pairwise_giou(pred_segments, gt_segments) + alpha_cls * cls_cost[:, None]


def caption_match_cost(token_logprobs: torch.Tensor, mask: torch.Tensor, pred_probs: torch.Tensor,
                       gamma: float = 2.0, alpha_cls: float = 0.5,
                       focal_alpha: float = 0.25, focal_gamma: float = 2.0) -> torch.Tensor:
    """(N, G) cost from teacher-forced caption likelihoods.

    token_logprobs, mask: (N, G, M). The caption term is the negated
    length-modulated log-likelihood so that likelier captions cost less.
    """
    lengths = mask.sum(-1).clamp(min=1).to(token_logprobs.dtype)
    cap = -(token_logprobs * mask).sum(-1) / lengths ** gamma
    cls_cost = focal_loss(pred_probs, torch.ones_like(pred_probs), focal_alpha, focal_gamma)
    return cap + alpha_cls * cls_cost[:, None]


@dataclass
class LayerOutput:
    """One decoder layer's predictions for a batch of B videos."""
    segments: torch.Tensor  # (B, N, 2) start/end
    logits: torch.Tensor  # (B, N) foreground logits
    count_logits: torch.Tensor  # (B, max_count + 1)
    queries: torch.Tensor | None = None  # (B, N, D)
    references: torch.Tensor | None = None  # (B, N) or (B, N, 2)
    center_length: torch.Tensor | None = None  # (B, N, 2)


@dataclass
class VideoTarget:
    segments: torch.Tensor  # (G, 2) start/end in [0, 1]
    captions: torch.Tensor  # (G, M) token ids padded with PAD, each ending in EOS

    @property
    def num_events(self) -> int:
        return int(self.segments.shape[0])


# caption_logprobs(layer, batch_index (P,), query_index (P,), captions (P, M)) -> (P, M) token log-probs
CaptionScorer = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class SetLoss:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    matchings: list[list[Matching]] = field(default_factory=list)  # [layer][video]


def match_layer(layer: int, out: LayerOutput, targets: Sequence[VideoTarget], matcher, loss_cfg,
                caption_scorer: CaptionScorer | None = None, by_caption: bool = False) -> list[Matching]:
    matchings = []
    with torch.no_grad():
        probs = out.logits.sigmoid()
        for b, tgt in enumerate(targets):
            if tgt.num_events == 0:
                matchings.append(Matching([], 0.0))
                continue
            if by_caption:
                N, G = out.logits.shape[1], tgt.num_events
                q_idx = torch.arange(N).repeat_interleave(G)
                g_idx = torch.arange(G).repeat(N)
                caps = tgt.captions[g_idx]
                logp = caption_scorer(layer, torch.full((N * G,), b, dtype=torch.long), q_idx, caps)
                mask = caps != 0
                cost = caption_match_cost(logp.view(N, G, -1), mask.view(N, G, -1), probs[b],
                                          matcher.caption_gamma, matcher.caption_alpha_cls,
                                          loss_cfg.focal_alpha, loss_cfg.focal_gamma)
            else:
                cost = match_cost(out.segments[b], probs[b], tgt.segments, matcher.alpha_giou, matcher.alpha_cls,
                                  loss_cfg.focal_alpha, loss_cfg.focal_gamma)
            matchings.append(hungarian(cost.detach().cpu().numpy()))
    return matchings


def set_loss(layers: Sequence[LayerOutput], targets: Sequence[VideoTarget], loss_cfg, matcher,
             caption_scorer: CaptionScorer | None, by_caption: bool = False,
             use_giou: bool = True, localization: bool = True) -> SetLoss:
    """Weighted gIOU, focal classification, counter and caption terms, summed over layers.

    Videos without events skip the gIOU and caption terms; all their queries
    are negatives and the counter target is 0.
    """
    total = layers[0].logits.new_zeros(())
    comps = {"giou": 0.0, "cls": 0.0, "ec": 0.0, "cap": 0.0}
    all_matchings = []
    for li, out in enumerate(layers):
        matchings = match_layer(li, out, targets, matcher, loss_cfg, caption_scorer, by_caption)
        all_matchings.append(matchings)
        B, N = out.logits.shape
        b_idx = torch.tensor([b for b, m in enumerate(matchings) for _ in m.pairs], dtype=torch.long)
        q_idx = torch.tensor([q for m in matchings for q, _ in m.pairs], dtype=torch.long)
        num_matched = len(q_idx)
        norm = max(num_matched, 1)

        terms = {}
        cls_target = torch.zeros_like(out.logits)
        if num_matched:
            cls_target[b_idx, q_idx] = 1.0
        if localization:
            terms["cls"] = focal_loss_with_logits(out.logits, cls_target, loss_cfg.focal_alpha,
                                                  loss_cfg.focal_gamma).sum() / norm
        else:
            terms["cls"] = total.new_zeros(())

        count_target = torch.tensor([min(t.num_events, out.count_logits.shape[-1] - 1) for t in targets],
                                    dtype=torch.long)
        terms["ec"] = F.cross_entropy(out.count_logits, count_target) if localization else total.new_zeros(())

        if num_matched and use_giou and localization:
            gt = torch.cat([targets[b].segments[[g for _, g in m.pairs]] for b, m in enumerate(matchings) if m.pairs])
            pred = out.segments[b_idx, q_idx]
            terms["giou"] = (1 - giou_tensor(pred, gt.to(pred.dtype))).sum() / num_matched
        else:
            terms["giou"] = total.new_zeros(())

        if num_matched and caption_scorer is not None:
            caps = [targets[b].captions[[g for _, g in m.pairs]] for b, m in enumerate(matchings) if m.pairs]
            width = max(c.shape[1] for c in caps)
            caps = torch.cat([F.pad(c, (0, width - c.shape[1])) for c in caps])
            logp = caption_scorer(li, b_idx, q_idx, caps)
            mask = (caps != 0).to(logp.dtype)
            per_caption = -(logp * mask).sum(-1) / mask.sum(-1).clamp(min=1)
            terms["cap"] = per_caption.mean()
        else:
            terms["cap"] = total.new_zeros(())

        betas = {"giou": loss_cfg.beta_giou, "cls": loss_cfg.beta_cls, "ec": loss_cfg.beta_ec, "cap": loss_cfg.beta_cap}
        for k, v in terms.items():
            total = total + betas[k] * v
            comps[k] += float(v.detach())
    return SetLoss(total, comps, all_matchings)
