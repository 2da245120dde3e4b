"""Prediction heads applied to refined event queries: localization, the two
captioners and the event counter."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .deformable import sample_linear
from .geometry import TemporalSegment, inverse_sigmoid, segment_from_center_length, CenterLength
from .text import BOS, EOS, PAD


@dataclass
class EventDetection:
    segment: TemporalSegment
    loc_confidence: float
    query_index: int


@dataclass
class CaptionHypothesis:
    tokens: list[int]
    token_probs: list[float]
    truncated: bool = False

    def __post_init__(self):
        if not self.tokens or self.tokens[-1] != EOS:
            raise ValueError("caption must be non-empty and end with EOS")
        if len(self.tokens) != len(self.token_probs):
            raise ValueError("tokens and token_probs differ in length")

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class CountPrediction:
    distribution: list[float]
    predicted_count: int = field(init=False)

    def __post_init__(self):
        best = max(range(len(self.distribution)), key=lambda i: (self.distribution[i], -i))
        self.predicted_count = max(best, 1)


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class LocalizationHead(nn.Module):
    """Segment offsets from a 3-layer MLP and a separate linear foreground logit.

    For a scalar reference ``p`` the center is ``sigmoid(logit(p) + dc)`` and the
    length ``sigmoid(raw_length)``. A (center, length) reference moves both
    components in inverse-sigmoid space.
    """

    def __init__(self, d_model: int, prior_prob: float = 0.01):
        super().__init__()
        self.box = MLP(d_model, d_model, 2, 3)
        self.cls = nn.Linear(d_model, 1)
        nn.init.zeros_(self.box.layers[-1].weight)
        nn.init.zeros_(self.box.layers[-1].bias)
        nn.init.constant_(self.cls.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, query: torch.Tensor, reference: torch.Tensor):
        """Returns ((..., 2) center/length, (...,) foreground logits)."""
        delta = self.box(query)
        if reference.dim() == query.dim():
            cl = (inverse_sigmoid(reference) + delta).sigmoid()
        else:
            center = (inverse_sigmoid(reference) + delta[..., 0]).sigmoid()
            cl = torch.stack([center, delta[..., 1].sigmoid()], dim=-1)
        return cl, self.cls(query).squeeze(-1)

    def localize(self, query: torch.Tensor, reference: float, query_index: int = 0) -> EventDetection:
        with torch.no_grad():
            cl, logit = self(query[None], torch.tensor([reference], dtype=query.dtype))
        c, w = cl[0].tolist()
        return EventDetection(segment_from_center_length(CenterLength(c, w)), float(logit.sigmoid()), query_index)


class EventCounter(nn.Module):
    """Max-pool over queries, then an affine map to ``max_count + 1`` logits."""

    def __init__(self, d_model: int, max_count: int):
        super().__init__()
        self.max_count = max_count
        self.fc = nn.Linear(d_model, max_count + 1)

    def forward(self, queries: torch.Tensor) -> torch.Tensor:
        return self.fc(queries.max(dim=-2).values)

    def count_events(self, queries: torch.Tensor) -> CountPrediction:
        with torch.no_grad():
            probs = self(queries).softmax(-1)
        return CountPrediction(probs.tolist())


@dataclass
class CaptionBatch:
    """Greedy decoding output for P queries."""
    tokens: torch.Tensor  # (P, S) with PAD after EOS
    probs: torch.Tensor  # (P, S), 0 after EOS
    lengths: torch.Tensor  # (P,) including EOS
    truncated: torch.Tensor  # (P,) bool

    def hypotheses(self) -> list[CaptionHypothesis]:
        out = []
        for i in range(self.tokens.shape[0]):
            n = int(self.lengths[i])
            out.append(CaptionHypothesis(self.tokens[i, :n].tolist(), self.probs[i, :n].tolist(),
                                         bool(self.truncated[i])))
        return out


class _Captioner(nn.Module):
    """Shared teacher-forcing and greedy loops over a ``step`` function."""

    def __init__(self, vocab_size: int, word_embed: int, hidden: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.embed = nn.Embedding(vocab_size, word_embed, padding_idx=PAD)
        self.logit = nn.Linear(hidden, vocab_size)

    def prepare(self, query, reference=None, memory=None, batch_index=None):
        return {"query": query}

    def step(self, ctx, prev_tokens, state):
        raise NotImplementedError

    def _init_state(self, query):
        z = query.new_zeros(query.shape[0], self.hidden)
        return z, z

    def teacher_forcing(self, query, targets, reference=None, memory=None, batch_index=None) -> torch.Tensor:
        """Log-probabilities (P, M, V) for predicting ``targets`` (P, M) step by step."""
        ctx = self.prepare(query, reference, memory, batch_index)
        state = self._init_state(query)
        prev = torch.full((query.shape[0],), BOS, dtype=torch.long, device=query.device)
        out = []
        for t in range(targets.shape[1]):
            logp, state = self.step(ctx, prev, state)
            out.append(logp)
            prev = targets[:, t]
        return torch.stack(out, dim=1)

    @torch.no_grad()
    def greedy(self, query, max_len: int, reference=None, memory=None, batch_index=None) -> CaptionBatch:
        P = query.shape[0]
        ctx = self.prepare(query, reference, memory, batch_index)
        state = self._init_state(query)
        prev = torch.full((P,), BOS, dtype=torch.long, device=query.device)
        tokens = torch.full((P, max_len), PAD, dtype=torch.long)
        probs = torch.zeros(P, max_len, dtype=query.dtype)
        lengths = torch.zeros(P, dtype=torch.long)
        truncated = torch.zeros(P, dtype=torch.bool)
        done = torch.zeros(P, dtype=torch.bool)
        for t in range(max_len):
            logp, state = self.step(ctx, prev, state)
            p = logp.exp()
            word = p.argmax(-1)
            if t == max_len - 1:
                # out of room: force the end token and record it
                truncated |= ~done & (word != EOS)
                word = torch.full_like(word, EOS)
            active = ~done
            tokens[active, t] = word[active]
            probs[active, t] = p[active].gather(1, word[active, None]).squeeze(1)
            lengths[active] = t + 1
            done |= word == EOS
            prev = word
            if bool(done.all()):
                break
        return CaptionBatch(tokens, probs, lengths, truncated)


class LightCaptioner(_Captioner):
    """LSTM fed the event query and the previous word at every step."""

    def __init__(self, d_model, vocab_size, word_embed, hidden):
        super().__init__(vocab_size, word_embed, hidden)
        self.cell = nn.LSTMCell(d_model + word_embed, hidden)

    def step(self, ctx, prev_tokens, state):
        x = torch.cat([ctx["query"], self.embed(prev_tokens)], dim=-1)
        h, c = self.cell(x, state)
        return F.log_softmax(self.logit(h), -1), (h, c)


class DSACaptioner(_Captioner):
    """LSTM with deformable soft attention around the event's reference point.

    Each step samples K points per level at offsets predicted from ``[h, q]``,
    soft-attends over the K*L samples with the same query and feeds
    ``[z, q, embed(prev)]`` to the LSTM.
    """

    def __init__(self, d_model, vocab_size, word_embed, hidden, n_levels, n_points, att_dim=None):
        super().__init__(vocab_size, word_embed, hidden)
        att_dim = att_dim or d_model
        self.n_levels, self.n_points = n_levels, n_points
        self.cell = nn.LSTMCell(2 * d_model + word_embed, hidden)
        self.query_proj = nn.Linear(hidden + d_model, d_model)
        self.sampling_offsets = nn.Linear(d_model, n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.att_feat = nn.Linear(d_model, att_dim)
        self.att_query = nn.Linear(hidden + d_model, att_dim)
        self.att_score = nn.Linear(att_dim, 1)
        nn.init.zeros_(self.sampling_offsets.weight)
        with torch.no_grad():
            # symmetric spread: -K/2 .. K/2 frames around the reference
            spread = torch.arange(n_points, dtype=torch.float32) - (n_points - 1) / 2
            self.sampling_offsets.bias.copy_(spread.repeat(n_levels))

    def prepare(self, query, reference=None, memory=None, batch_index=None):
        if reference is None or memory is None:
            raise ValueError("deformable soft attention needs reference points and memory")
        if reference.dim() == 2:
            reference = reference[:, 0]
        if batch_index is None:
            batch_index = torch.zeros(query.shape[0], dtype=torch.long)
        values = [self.value_proj(lvl)[batch_index] for lvl in memory]  # each (P, T_l, D)
        return {"query": query, "reference": reference, "values": values}

    def attend(self, ctx, h, return_weights=False):
        q = ctx["query"]
        hq = torch.cat([h, q], dim=-1)
        sq = self.query_proj(hq)
        P = q.shape[0]
        offsets = self.sampling_offsets(sq).view(P, self.n_levels, self.n_points)
        samples = []
        for lvl, value in enumerate(ctx["values"]):
            T_l = value.shape[1]
            pos = (ctx["reference"][:, None] + offsets[:, lvl] / T_l) * (T_l - 1)  # (P, K)
            s = sample_linear(value[:, None], pos[:, None, None, :])  # (P, 1, 1, K, D)
            samples.append(s[:, 0, 0])
        feats = torch.cat(samples, dim=1)  # (P, L*K, D)
        scores = self.att_score(torch.tanh(self.att_feat(feats) + self.att_query(hq)[:, None])).squeeze(-1)
        alpha = scores.softmax(-1)
        z = (alpha.unsqueeze(-1) * feats).sum(1)
        if return_weights:
            return z, alpha
        return z

    def step(self, ctx, prev_tokens, state):
        h, c = state
        z = self.attend(ctx, h)
        x = torch.cat([z, ctx["query"], self.embed(prev_tokens)], dim=-1)
        h, c = self.cell(x, (h, c))
        return F.log_softmax(self.logit(h), -1), (h, c)


def caption_token_logprobs(logp: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather per-token log-probabilities of ``targets`` and the non-PAD mask."""
    mask = targets != PAD
    tok = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return tok * mask, mask
