"""The full dense captioning network: pyramid, deformable encoder/decoder and
parallel heads shared across decoder layers."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .deformable import DecoderLayer, DeformableDecoder, DeformableEncoder, EncoderLayer
from .features import PositionalEncoding, PyramidBuilder
from .geometry import cl_to_se
from .heads import CaptionBatch, DSACaptioner, EventCounter, LightCaptioner, LocalizationHead, caption_token_logprobs
from .matching import LayerOutput

WEAK_SAMPLING_POINTS = 4


@dataclass
class ModelOutput:
    memory: list[torch.Tensor]
    layers: list[LayerOutput]

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class DenseCaptioner(nn.Module):
    """Set-prediction dense captioner.

    ``weak=True`` switches to the caption-supervised proposal variant: references
    become (center, length) pairs, decoder cross-attention samples 4 evenly
    spaced points across each reference, and reference updates stay attached
    to the graph so caption gradients can move them. ``paragraph=True`` adds a
    linear embedding of given proposals used in place of the learned queries.
    """

    def __init__(self, cfg: ModelConfig, c_in: int, vocab_size: int, weak: bool = False, paragraph: bool = False):
        super().__init__()
        self.cfg = cfg
        self.c_in, self.vocab_size = c_in, vocab_size
        self.weak, self.paragraph = weak, paragraph
        D = cfg.d_model
        self.pyramid = PyramidBuilder(c_in, D, cfg.n_levels)
        self.pos_embed = PositionalEncoding(D, cfg.n_levels)
        self.encoder = DeformableEncoder(
            EncoderLayer(D, cfg.d_ffn, cfg.n_levels, cfg.n_heads, cfg.n_points, cfg.dropout), cfg.enc_layers)
        self.query_embed = nn.Embedding(cfg.num_queries, 2 * D)
        self.ref_dim = 2 if weak else 1
        self.reference_points = nn.Linear(D, self.ref_dim)
        dec_points = WEAK_SAMPLING_POINTS if weak else cfg.n_points
        self.decoder = DeformableDecoder(
            DecoderLayer(D, cfg.d_ffn, cfg.n_levels, cfg.n_heads, dec_points, fixed_points=weak, dropout=cfg.dropout),
            cfg.dec_layers, detach_refs=not weak)
        self.loc_head = LocalizationHead(D)
        self.counter = EventCounter(D, cfg.max_count)
        if cfg.caption_head == "dsa":
            self.captioner = DSACaptioner(D, vocab_size, cfg.word_embed, cfg.caption_hidden, cfg.n_levels, cfg.n_points)
        else:
            self.captioner = LightCaptioner(D, vocab_size, cfg.word_embed, cfg.caption_hidden)
        if paragraph:
            self.proposal_embed = nn.Linear(2, 2 * D)
        nn.init.xavier_uniform_(self.reference_points.weight)
        nn.init.zeros_(self.reference_points.bias)

    def encode(self, frames: torch.Tensor) -> list[torch.Tensor]:
        pyramid = self.pyramid(frames)
        pos = self.pos_embed(pyramid.lengths, dtype=frames.dtype)
        return self.encoder(pyramid.levels, pos)

    def initial_queries(self, batch: int):
        D = self.cfg.d_model
        query_pos, tgt = self.query_embed.weight.split(D, dim=-1)
        query_pos = query_pos[None].expand(batch, -1, -1)
        tgt = tgt[None].expand(batch, -1, -1)
        reference = self.reference_points(query_pos).sigmoid()
        if self.ref_dim == 1:
            reference = reference[..., 0]
        return tgt, query_pos, reference

    def forward(self, frames: torch.Tensor) -> ModelOutput:
        if frames.dim() == 2:
            frames = frames[None]
        memory = self.encode(frames)
        tgt, query_pos, reference = self.initial_queries(frames.shape[0])
        head_out = []

        def refine(q, ref):
            cl, logits = self.loc_head(q, ref)
            head_out.append((cl, logits))
            return cl if self.ref_dim == 2 else cl[..., 0]

        queries, inputs, _ = self.decoder(tgt, query_pos, reference, memory, refine)
        layers = []
        for q, ref_in, (cl, logits) in zip(queries, inputs, head_out):
            layers.append(LayerOutput(segments=cl_to_se(cl), logits=logits, count_logits=self.counter(q),
                                      queries=q, references=ref_in, center_length=cl))
        return ModelOutput(memory, layers)

    def forward_proposals(self, frames: torch.Tensor, proposals: torch.Tensor,
                          padding_mask: torch.Tensor | None = None) -> ModelOutput:
        """Paragraph mode: proposals (B, P, 2) as (center, length) become the queries;
        references are the proposal centers and are not refined. ``padding_mask``
        (B, P) marks padded proposals, which no query attends to."""
        if not self.paragraph:
            raise ValueError("this model was trained without --paragraph and cannot caption given proposals")
        if frames.dim() == 2:
            frames = frames[None]
        memory = self.encode(frames)
        query_pos, tgt = self.proposal_embed(proposals).split(self.cfg.d_model, dim=-1)
        reference = proposals[..., 0] if self.ref_dim == 1 else proposals
        queries, inputs, _ = self.decoder(tgt, query_pos, reference, memory, None, padding_mask)
        layers = []
        for q, ref_in in zip(queries, inputs):
            cl = proposals
            layers.append(LayerOutput(segments=cl_to_se(cl), logits=q.new_zeros(q.shape[:2]),
                                      count_logits=q.new_zeros(q.shape[0], self.cfg.max_count + 1),
                                      queries=q, references=ref_in, center_length=cl))
        return ModelOutput(memory, layers)

    def _caption_reference(self, layer: LayerOutput, b_idx, q_idx):
        return layer.center_length[b_idx, q_idx, 0].detach()

    def caption_logprobs(self, out: ModelOutput, layer: int, b_idx: torch.Tensor, q_idx: torch.Tensor,
                         captions: torch.Tensor) -> torch.Tensor:
        """Teacher-forced per-token log-probabilities (P, M) of ``captions`` for the
        selected (video, query) pairs at one decoder layer; 0 at PAD positions."""
        lo = out.layers[layer]
        q = lo.queries[b_idx, q_idx]
        logp = self.captioner.teacher_forcing(q, captions, reference=self._caption_reference(lo, b_idx, q_idx),
                                              memory=out.memory, batch_index=b_idx)
        tok, _ = caption_token_logprobs(logp, captions)
        return tok

    def scorer(self, out: ModelOutput):
        return lambda layer, b_idx, q_idx, caps: self.caption_logprobs(out, layer, b_idx, q_idx, caps)

    @torch.no_grad()
    def caption_greedy(self, out: ModelOutput, b: int, layer: int = -1) -> CaptionBatch:
        lo = out.layers[layer]
        N = lo.queries.shape[1]
        b_idx = torch.full((N,), b, dtype=torch.long)
        q_idx = torch.arange(N)
        return self.captioner.greedy(lo.queries[b], self.cfg.max_caption_len,
                                     reference=self._caption_reference(lo, b_idx, q_idx),
                                     memory=out.memory, batch_index=b_idx)

