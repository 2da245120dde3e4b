import itertools
import math

import numpy as np
import pytest
import torch

from densecap.config import LossConfig, MatcherConfig
from densecap.matching import (LayerOutput, VideoTarget, caption_match_cost, focal_loss, focal_loss_with_logits,
                               hungarian, match_cost, set_loss)


def brute_force_min(cost: np.ndarray) -> float:
    """Minimum over all injections of the smaller side into the larger."""
    n, g = cost.shape
    if n >= g:
        return min(sum(cost[p[j], j] for j in range(g)) for p in itertools.permutations(range(n), g))
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(g), n))


def test_hungarian_identity_and_singleton():
    m = hungarian(np.ones((4, 4)) - np.eye(4))
    assert m.pairs == [(i, i) for i in range(4)] and m.total_cost == 0
    m = hungarian([[3.5]])
    assert m.pairs == [(0, 0)] and m.total_cost == 3.5


def test_hungarian_6x4_vs_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = rng.standard_normal((6, 4))
        m = hungarian(c)
        assert len(m.pairs) == 4
        assert len({q for q, _ in m.pairs}) == 4 and len({g for _, g in m.pairs}) == 4
        assert m.total_cost == pytest.approx(brute_force_min(c), abs=1e-12)


def test_hungarian_errors_and_empty():
    with pytest.raises(ValueError):
        hungarian([[1.0, float("nan")]])
    assert hungarian(np.zeros((3, 0))).pairs == []


def test_focal_closed_forms():
    assert focal_loss(0.5, 1, 0.25, 2.0) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert focal_loss(0.5, 1, 0.25, 2.0) == pytest.approx(0.04332, abs=1e-5)
    assert focal_loss(1 - 1e-9, 1) < 1e-12
    for p in (0.1, 0.4, 0.8):
        for t in (0, 1):
            bce = -math.log(p if t else 1 - p)
            assert focal_loss(p, t, 0.5, 0.0) == pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_logits_matches_prob_form():
    logits = torch.linspace(-4, 4, 17, dtype=torch.float64)
    for t in (0.0, 1.0):
        target = torch.full_like(logits, t)
        a = focal_loss_with_logits(logits, target, 0.25, 2.0)
        b = focal_loss(logits.sigmoid(), target, 0.25, 2.0)
        assert torch.allclose(a, b, atol=1e-10)


def test_match_cost_limits_and_hand_instance():
    seg = torch.tensor([[0.1, 0.5]], dtype=torch.float64)
    c = match_cost(seg, torch.tensor([1 - 1e-9], dtype=torch.float64), seg)
    assert c.item() == pytest.approx(-2.0, abs=1e-6)
    preds = torch.tensor([[0.1, 0.5], [0.0, 0.2]], dtype=torch.float64)
    gts = torch.tensor([[0.3, 0.7], [0.8, 1.0]], dtype=torch.float64)
    probs = torch.tensor([0.5, 0.8], dtype=torch.float64)
    c0 = match_cost(preds, probs, gts, alpha_giou=0.0)
    assert torch.equal(c0[:, 0], c0[:, 1])
    c = match_cost(preds, probs, gts)
    # hand arithmetic: gIOU table, focal(p, 1) = 0.25 (1 - p)^2 (-ln p)
    giou = [[1 / 3, -(0.9 - 0.6) / 0.9], [-(0.7 - 0.6) / 0.7, -0.6]]
    foc = [0.25 * 0.25 * math.log(2), 0.25 * 0.04 * -math.log(0.8)]
    for i in range(2):
        for j in range(2):
            assert c[i, j].item() == pytest.approx(-2 * giou[i][j] + foc[i], abs=1e-12)


def test_caption_match_cost_properties():
    lp = torch.log(torch.tensor([[[1.0, 1.0, 1.0], [0.5, 0.5, 0.5]]], dtype=torch.float64))
    mask = torch.ones_like(lp)
    probs = torch.tensor([1 - 1e-12], dtype=torch.float64)
    c = caption_match_cost(lp, mask, probs, gamma=1.0, alpha_cls=0.0)
    assert c[0, 0].item() == pytest.approx(0.0, abs=1e-12)
    assert c[0, 0] < c[0, 1]
    c0 = caption_match_cost(lp, mask, probs, gamma=0.0, alpha_cls=0.0)
    c1 = caption_match_cost(lp, mask, probs, gamma=1.0, alpha_cls=0.0)
    assert c1[0, 1].item() == pytest.approx(c0[0, 1].item() / 3)


def test_caption_cost_3x2_matching_vs_brute_force():
    g = torch.Generator().manual_seed(3)
    lp = torch.log(torch.rand(3, 2, 5, generator=g, dtype=torch.float64))
    mask = torch.ones_like(lp)
    mask[:, 1, 3:] = 0
    c = caption_match_cost(lp, mask, torch.rand(3, generator=g, dtype=torch.float64)).numpy()
    assert hungarian(c).total_cost == pytest.approx(brute_force_min(c), abs=1e-12)


def _perfect_layer(segments, eps, max_count=10, n_queries=3):
    """Queries 0..G-1 reproduce the ground truth exactly with confidence 1 - eps; the rest have confidence eps."""
    G = segments.shape[0]
    segs = torch.zeros(1, n_queries, 2, dtype=torch.float64)
    segs[0, :G] = segments
    segs[0, G:] = torch.tensor([0.0, 0.05])
    logit = math.log((1 - eps) / eps)
    logits = torch.full((1, n_queries), -logit, dtype=torch.float64)
    logits[0, :G] = logit
    count = torch.full((1, max_count + 1), -50.0, dtype=torch.float64)
    count[0, G] = 50.0
    return LayerOutput(segments=segs, logits=logits, count_logits=count, queries=None, references=None,
                       center_length=None)


def _perfect_scorer(eps):
    def scorer(layer, b_idx, q_idx, caps):
        return torch.full(caps.shape, math.log(1 - eps), dtype=torch.float64)
    return scorer


def test_set_loss_perfect_predictions_near_zero():
    eps = 1e-4
    segs = torch.tensor([[0.1, 0.3], [0.5, 0.9]], dtype=torch.float64)
    caps = torch.tensor([[5, 6, 2], [7, 2, 0]])
    loss_cfg = LossConfig()
    out = set_loss([_perfect_layer(segs, eps)] * 2, [VideoTarget(segs, caps)], loss_cfg, MatcherConfig(),
                   _perfect_scorer(eps))
    beta_sum = loss_cfg.beta_giou + loss_cfg.beta_cls + loss_cfg.beta_ec + loss_cfg.beta_cap
    assert out.total.item() < 10 * eps * beta_sum * 2  # two layers
    assert [m.pairs for m in out.matchings[0]] == [[(0, 0), (1, 1)]]


def test_set_loss_linear_in_beta():
    g = torch.Generator().manual_seed(0)
    layer = LayerOutput(segments=torch.sort(torch.rand(2, 4, 2, generator=g, dtype=torch.float64), -1).values,
                        logits=torch.randn(2, 4, generator=g, dtype=torch.float64),
                        count_logits=torch.randn(2, 11, generator=g, dtype=torch.float64),
                        queries=None, references=None, center_length=None)
    targets = [VideoTarget(torch.tensor([[0.1, 0.4]], dtype=torch.float64), torch.tensor([[4, 2]])),
               VideoTarget(torch.tensor([[0.0, 0.3], [0.6, 0.8]], dtype=torch.float64), torch.tensor([[4, 5, 2], [6, 2, 0]]))]

    def scorer(layer, b_idx, q_idx, caps):
        return -0.1 * (q_idx[:, None] + 1).to(torch.float64) * torch.ones(caps.shape, dtype=torch.float64)

    base = LossConfig()
    double = LossConfig(beta_giou=2 * base.beta_giou, beta_cls=2 * base.beta_cls, beta_ec=2 * base.beta_ec,
                        beta_cap=2 * base.beta_cap)
    a = set_loss([layer], targets, base, MatcherConfig(), scorer).total
    b = set_loss([layer], targets, double, MatcherConfig(), scorer).total
    assert b.item() == pytest.approx(2 * a.item(), rel=1e-12)


def test_set_loss_single_video_straight_line():
    """Recompute every term by hand for one video, one layer."""
    segs = torch.tensor([[[0.1, 0.5], [0.4, 0.9], [0.0, 0.1]]], dtype=torch.float64)
    logits = torch.tensor([[0.3, -0.2, -1.0]], dtype=torch.float64)
    count_logits = torch.tensor([[0.0, 0.5, 0.2, -0.1]], dtype=torch.float64)
    layer = LayerOutput(segments=segs, logits=logits, count_logits=count_logits, queries=None, references=None,
                        center_length=None)
    gt = torch.tensor([[0.5, 1.0]], dtype=torch.float64)
    caps = torch.tensor([[4, 5, 2]])

    def scorer(layer, b_idx, q_idx, c):
        return torch.log(torch.tensor([[0.5, 0.25, 0.8]], dtype=torch.float64)).expand(len(q_idx), 3)

    cfg = LossConfig(beta_giou=2, beta_cls=1, beta_ec=1, beta_cap=1)
    out = set_loss([layer], [VideoTarget(gt, caps)], cfg, MatcherConfig(), scorer)

    # matching by hand: gIOU of each prediction with [0.5, 1.0]
    p = [1 / (1 + math.exp(-x)) for x in (0.3, -0.2, -1.0)]
    giou = [0.0, 0.4 / 0.6, -(1.0 - 0.6) / 1.0]  # the first pair touches, so hull = union
    cost = [-2 * giou[i] + 0.25 * (1 - p[i]) ** 2 * -math.log(p[i]) for i in range(3)]
    j = min(range(3), key=lambda i: cost[i])
    assert j == 1 and out.matchings[0][0].pairs == [(1, 0)]
    l_giou = 1 - giou[1]
    foc = sum((0.25 * (1 - p[i]) ** 2 * -math.log(p[i])) if i == j else (0.75 * p[i] ** 2 * -math.log(1 - p[i]))
              for i in range(3))
    l_cls = foc / 1
    z = [math.exp(v) for v in (0.0, 0.5, 0.2, -0.1)]
    l_ec = -math.log(z[1] / sum(z))
    l_cap = -(math.log(0.5) + math.log(0.25) + math.log(0.8)) / 3
    expected = 2 * l_giou + l_cls + l_ec + l_cap
    assert out.total.item() == pytest.approx(expected, abs=1e-10)
