"""Multi-scale deformable attention over 1-D temporal pyramids, and the
encoder / decoder stacks built on it."""
from __future__ import annotations

import copy
from typing import Callable

import torch
from torch import nn

from .features import ConfigError


def sample_linear(values: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Read ``values`` at fractional indices by linear interpolation.

    values: (B, H, T, Dh); positions: (B, H, Q, P) continuous frame indices.
    Out-of-range positions are clamped to the edge frames. Returns (B, H, Q, P, Dh).
    """
    B, H, T, Dh = values.shape
    _, _, Q, P = positions.shape
    pos = positions.clamp(0, T - 1)
    i0 = pos.detach().floor().clamp(max=T - 1)
    w = (pos - i0).unsqueeze(-1)
    i0 = i0.long()
    i1 = (i0 + 1).clamp(max=T - 1)

    def gather(idx):
        idx = idx.reshape(B, H, Q * P, 1).expand(B, H, Q * P, Dh)
        return values.gather(2, idx).reshape(B, H, Q, P, Dh)

    return gather(i0) * (1 - w) + gather(i1) * w


def evenly_spaced_positions(reference: torch.Tensor, n_points: int) -> torch.Tensor:
    """(..., 2) (center, length) -> (..., n_points) normalized positions spanning
    ``center - length/2`` to ``center + length/2``."""
    c, length = reference[..., 0:1], reference[..., 1:2]
    if n_points == 1:
        return c
    frac = torch.linspace(-0.5, 0.5, n_points, dtype=reference.dtype, device=reference.device)
    return c + length * frac


class MSDeformAttn(nn.Module):
    """Multi-head deformable attention over L temporal levels with K points per level.

    With ``fixed_points=True`` the learned offsets are replaced by K evenly spaced
    positions across a 2-D (center, length) reference; attention weights stay learned.
    """

    def __init__(self, d_model: int, n_levels: int, n_heads: int, n_points: int, fixed_points: bool = False):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} not divisible by heads={n_heads}")
        if n_points < 1 or n_levels < 1:
            raise ConfigError("need at least one level and one sampling point")
        self.d_model, self.n_levels, self.n_heads, self.n_points = d_model, n_levels, n_heads, n_points
        self.fixed_points = fixed_points
        self.head_dim = d_model // n_heads
        if not fixed_points:
            self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self):
        if not self.fixed_points:
            nn.init.zeros_(self.sampling_offsets.weight)
            # heads alternate looking backward / forward, point k at distance k+1 frames
            direction = torch.tensor([1.0 if h % 2 == 0 else -1.0 for h in range(self.n_heads)])
            grid = direction[:, None, None] * torch.arange(1, self.n_points + 1, dtype=torch.float32)[None, None, :]
            grid = grid.expand(self.n_heads, self.n_levels, self.n_points)
            with torch.no_grad():
                self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling_positions(self, query: torch.Tensor, reference: torch.Tensor, lengths: list[int]) -> torch.Tensor:
        """Normalized positions (B, Q, H, L, K) before mapping to frame indices."""
        B, Q, _ = query.shape
        H, L, K = self.n_heads, self.n_levels, self.n_points
        if self.fixed_points:
            if reference.shape[-1] != 2 or reference.dim() != 3:
                raise ValueError("fixed-point sampling needs (B, Q, 2) center/length references")
            pos = evenly_spaced_positions(reference, K)  # (B, Q, K)
            return pos[:, :, None, None, :].expand(B, Q, H, L, K)
        if reference.dim() == 3:
            reference = reference[..., 0]
        offsets = self.sampling_offsets(query).view(B, Q, H, L, K)
        scale = torch.tensor(lengths, dtype=query.dtype, device=query.device).view(1, 1, 1, L, 1)
        # offsets are in frames of each level; divide by T_l to move in normalized time
        return reference[:, :, None, None, None] + offsets / scale

    def forward(self, query: torch.Tensor, reference: torch.Tensor, levels: list[torch.Tensor],
                return_weights: bool = False):
        """query (B, Q, D); reference (B, Q) normalized points, or (B, Q, 2);
        levels: L tensors (B, T_l, D). Returns (B, Q, D)."""
        if len(levels) != self.n_levels:
            raise ValueError(f"expected {self.n_levels} levels, got {len(levels)}")
        if not torch.isfinite(query).all() or not torch.isfinite(reference).all():
            raise ValueError("non-finite query or reference point")
        B, Q, D = query.shape
        H, L, K, Dh = self.n_heads, self.n_levels, self.n_points, self.head_dim
        lengths = [lvl.shape[1] for lvl in levels]
        norm_pos = self.sampling_positions(query, reference, lengths)
        logits = self.attention_weights(query).view(B, Q, H, L * K)
        weights = logits.softmax(-1).view(B, Q, H, L, K)

        sampled = []
        for lvl, (feat, T_l) in enumerate(zip(levels, lengths)):
            value = self.value_proj(feat).view(B, T_l, H, Dh).permute(0, 2, 1, 3)
            index = norm_pos[:, :, :, lvl, :].permute(0, 2, 1, 3) * (T_l - 1)  # (B, H, Q, K)
            sampled.append(sample_linear(value, index))  # (B, H, Q, K, Dh)
        sampled = torch.stack(sampled, dim=3)  # (B, H, Q, L, K, Dh)
        w = weights.permute(0, 2, 1, 3, 4).unsqueeze(-1)  # (B, H, Q, L, K, 1)
        out = (sampled * w).sum(dim=(3, 4))  # (B, H, Q, Dh)
        out = self.output_proj(out.permute(0, 2, 1, 3).reshape(B, Q, D))
        if return_weights:
            return out, weights
        return out


def _ffn(d_model: int, d_ffn: int, dropout: float = 0.0) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, d_ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ffn, d_model),
                         nn.Dropout(dropout))


class EncoderLayer(nn.Module):
    """Pre-norm deformable self-attention + feed-forward, each in a residual branch."""

    def __init__(self, d_model, d_ffn, n_levels, n_heads, n_points, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points)
        self.dropout = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = _ffn(d_model, d_ffn, dropout)

    def forward(self, src, pos, reference, lengths):
        x = self.norm1(src)
        value_levels = list(x.split(lengths, dim=1))
        src = src + self.dropout(self.self_attn(x + pos, reference, value_levels))
        src = src + self.ffn(self.norm2(src))
        return src


class DeformableEncoder(nn.Module):
    def __init__(self, layer: EncoderLayer, num_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(copy.deepcopy(layer) for _ in range(num_layers))

    @staticmethod
    def reference_points(lengths: list[int], batch: int, dtype=torch.float32, device=None) -> torch.Tensor:
        """Each frame's own normalized position, used at every level."""
        refs = [torch.arange(n, dtype=dtype, device=device) / max(n - 1, 1) for n in lengths]
        return torch.cat(refs)[None].expand(batch, -1)

    def forward(self, levels: list[torch.Tensor], pos_embeds: list[torch.Tensor]) -> list[torch.Tensor]:
        lengths = [lvl.shape[1] for lvl in levels]
        src = torch.cat(levels, dim=1)
        pos = torch.cat([p.expand(src.shape[0], -1, -1) if p.dim() == 3 else p[None].expand(src.shape[0], -1, -1)
                         for p in pos_embeds], dim=1)
        reference = self.reference_points(lengths, src.shape[0], src.dtype, src.device)
        for layer in self.layers:
            src = layer(src, pos, reference, lengths)
        return list(src.split(lengths, dim=1))


class DecoderLayer(nn.Module):
    """Dense query self-attention, deformable cross-attention into memory, feed-forward."""

    def __init__(self, d_model, d_ffn, n_levels, n_heads, n_points, fixed_points=False, dropout=0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points, fixed_points=fixed_points)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = _ffn(d_model, d_ffn, dropout)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)

    def forward(self, tgt, query_pos, reference, memory: list[torch.Tensor], padding_mask=None):
        q = tgt + query_pos
        attn = self.self_attn(q, q, tgt, key_padding_mask=padding_mask, need_weights=False)[0]
        tgt = self.norm1(tgt + self.dropout1(attn))
        tgt = self.norm2(tgt + self.dropout2(self.cross_attn(tgt + query_pos, reference, memory)))
        return self.norm3(tgt + self.ffn(tgt))


RefineFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class DeformableDecoder(nn.Module):
    """Stack of decoder layers with iterative reference refinement.

    ``refine(query, reference)`` returns the refined reference predicted from a
    layer's output; it becomes the next layer's reference. With
    ``detach_refs`` (the default) the update is cut from the next layer's graph.
    """

    def __init__(self, layer: DecoderLayer, num_layers: int, detach_refs: bool = True):
        super().__init__()
        self.layers = nn.ModuleList(copy.deepcopy(layer) for _ in range(num_layers))
        self.detach_refs = detach_refs

    def forward(self, tgt, query_pos, reference, memory, refine: RefineFn | None = None, padding_mask=None):
        queries, inputs, refined = [], [], []
        for layer in self.layers:
            inputs.append(reference)
            tgt = layer(tgt, query_pos, reference, memory, padding_mask)
            new_ref = refine(tgt, reference) if refine is not None else reference
            queries.append(tgt)
            refined.append(new_ref)
            reference = new_ref.detach() if self.detach_refs else new_ref
        return queries, inputs, refined

