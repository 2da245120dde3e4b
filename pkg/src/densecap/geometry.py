"""One-dimensional interval arithmetic on normalized temporal segments.

Scalar helpers operate on :class:`TemporalSegment`; the ``*_tensor`` variants
operate on ``(..., 2)`` tensors of ``(start, end)`` pairs and are
differentiable, which is what the training losses use.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


class InvalidSegmentError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalSegment:
    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise InvalidSegmentError(f"invalid segment [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def to_center_length(self) -> "CenterLength":
        return CenterLength(self.center, self.length)


@dataclass(frozen=True)
class CenterLength:
    center: float
    length: float


def _check(seg: TemporalSegment) -> TemporalSegment:
    if not isinstance(seg, TemporalSegment):
        seg = TemporalSegment(*seg)
    elif not (0.0 <= seg.start <= seg.end <= 1.0):
        raise InvalidSegmentError(f"invalid segment [{seg.start}, {seg.end}]")
    return seg


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def segment_from_center_length(c: CenterLength) -> TemporalSegment:
    # out-of-range predictions are clamped, never rejected
    start = _clamp01(c.center - 0.5 * c.length)
    end = _clamp01(c.center + 0.5 * c.length)
    return TemporalSegment(start, max(start, end))


def iou(a: TemporalSegment, b: TemporalSegment) -> float:
    a, b = _check(a), _check(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        # both zero-length: identical points overlap fully
        return 1.0 if (a.start == b.start and a.end == b.end) else 0.0
    return inter / union


def giou(a: TemporalSegment, b: TemporalSegment) -> float:
    a, b = _check(a), _check(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    hull = max(a.end, b.end) - min(a.start, b.start)
    if hull <= 0.0:
        return 1.0
    return iou(a, b) - (hull - union) / hull


# ---------------------------------------------------------------------------
# tensor versions


def cl_to_se(x: torch.Tensor) -> torch.Tensor:
    """(center, length) -> (start, end), clamped into [0, 1]."""
    c, w = x.unbind(-1)
    return torch.stack([c - 0.5 * w, c + 0.5 * w], dim=-1).clamp(0.0, 1.0)


def se_to_cl(x: torch.Tensor) -> torch.Tensor:
    s, e = x.unbind(-1)
    return torch.stack([0.5 * (s + e), e - s], dim=-1)


def _parts(a: torch.Tensor, b: torch.Tensor):
    inter = (torch.minimum(a[..., 1], b[..., 1]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    hull = torch.maximum(a[..., 1], b[..., 1]) - torch.minimum(a[..., 0], b[..., 0])
    return inter, union, hull


def iou_tensor(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Elementwise IOU of broadcastable ``(..., 2)`` segment tensors."""
    inter, union, _ = _parts(a, b)
    return inter / union.clamp(min=eps)


def giou_tensor(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Elementwise generalized IOU of broadcastable ``(..., 2)`` segment tensors."""
    inter, union, hull = _parts(a, b)
    hull = hull.clamp(min=eps)
    return inter / union.clamp(min=eps) - (hull - union) / hull


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, 2) x (G, 2) -> (N, G)."""
    return iou_tensor(a[:, None, :], b[None, :, :])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return giou_tensor(a[:, None, :], b[None, :, :])


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(0.0, 1.0)
    return torch.log(x.clamp(min=eps) / (1.0 - x).clamp(min=eps))
