"""Frame-feature preprocessing: temporal rescaling, the multi-scale pyramid and
positional embeddings, plus the raw feature file format.

Feature file layout: ``<video_id>.bin`` holds ``T_raw * C_in`` little-endian
float32 values in row-major (frame-major) order; ``<video_id>.json`` is the
sidecar ``{"video_id", "T_raw", "C_in", "duration", "dtype": "<f4"}``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ConfigError(ValueError):
    pass


FEATURE_DTYPE = "<f4"


@dataclass
class FrameFeatureSequence:
    features: np.ndarray  # (T_raw, C_in)
    duration_seconds: float
    video_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.video_id}: expected a non-empty (T_raw, C_in) matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.video_id}: non-finite feature values")
        if not self.duration_seconds > 0:
            raise ValueError(f"{self.video_id}: duration must be positive")


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # each (B, T_l, D)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def lengths(self) -> list[int]:
        return [lvl.shape[1] for lvl in self.levels]


def write_feature_file(directory: str | Path, video_id: str, features: np.ndarray, duration: float) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(features, dtype=FEATURE_DTYPE)
    path = directory / f"{video_id}.bin"
    arr.tofile(path)
    sidecar = {"video_id": video_id, "T_raw": int(arr.shape[0]), "C_in": int(arr.shape[1]),
               "duration": float(duration), "dtype": FEATURE_DTYPE}
    (directory / f"{video_id}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def read_feature_file(path: str | Path) -> FrameFeatureSequence:
    """Read a feature file; ``path`` may point at the ``.bin``, the ``.json`` or the stem."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.fromfile(stem.with_suffix(".bin"), dtype=meta.get("dtype", FEATURE_DTYPE))
    expected = meta["T_raw"] * meta["C_in"]
    if data.size != expected:
        raise ValueError(f"{meta['video_id']}: expected {expected} values, found {data.size}")
    return FrameFeatureSequence(data.reshape(meta["T_raw"], meta["C_in"]), float(meta["duration"]), meta["video_id"])


def rescale_temporal(seq: FrameFeatureSequence | np.ndarray, T: int) -> np.ndarray:
    """Linearly interpolate a (T_raw, C) sequence to exactly ``T`` rows.

    Endpoints are aligned: output row ``i`` reads input position ``i * (T_raw - 1) / (T - 1)``.
    """
    x = seq.features if isinstance(seq, FrameFeatureSequence) else np.asarray(seq)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("cannot rescale an empty sequence")
    if T < 2:
        raise ConfigError("T must be at least 2")
    t_raw = x.shape[0]
    if t_raw == T:
        return x.copy()
    if t_raw == 1:
        return np.repeat(x, T, axis=0)
    pos = np.arange(T) * ((t_raw - 1) / (T - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, t_raw - 1)
    hi = np.minimum(lo + 1, t_raw - 1)
    w = (pos - lo)[:, None]
    out = x[lo] * (1.0 - w) + x[hi] * w
    # an endpoint-aligned grid hits the last input row exactly
    out[-1] = x[-1]
    return out.astype(x.dtype, copy=False)


def sinusoidal_embedding(length: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed sinusoid of normalized position ``i / (length - 1)``; first half sine, second half cosine."""
    if dim % 2:
        raise ConfigError(f"positional embedding width must be even, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)
    pos = pos / max(length - 1, 1) * 2 * math.pi
    half = dim // 2
    freqs = temperature ** (torch.arange(half, dtype=torch.float64) / half)
    angles = pos[:, None] / freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


def _groups(dim: int, preferred: int = 32) -> int:
    return math.gcd(dim, preferred)


class PyramidBuilder(nn.Module):
    """Projects (B, T, C_in) frames to ``num_levels`` temporal scales of width ``d_model``.

    Level 1 is an affine projection; each further level is a stride-2, kernel-3
    temporal convolution of the previous one, so level ``l`` has
    ``ceil(T / 2**(l-1))`` rows. Every level ends in group normalization.
    """

    def __init__(self, c_in: int, d_model: int, num_levels: int):
        super().__init__()
        if num_levels < 1:
            raise ConfigError("need at least one pyramid level")
        self.num_levels = num_levels
        self.input_proj = nn.ModuleList()
        self.input_proj.append(nn.Sequential(nn.Conv1d(c_in, d_model, kernel_size=1),
                                             nn.GroupNorm(_groups(d_model), d_model)))
        in_ch = c_in
        for _ in range(1, num_levels):
            self.input_proj.append(nn.Sequential(
                nn.Conv1d(in_ch, d_model, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(_groups(d_model), d_model)))
            in_ch = d_model
        for proj in self.input_proj:
            nn.init.xavier_uniform_(proj[0].weight, gain=1)
            nn.init.zeros_(proj[0].bias)

    def forward(self, frames: torch.Tensor) -> FeaturePyramid:
        if frames.dim() == 2:
            frames = frames.unsqueeze(0)
        T = frames.shape[1]
        if T < 2 ** (self.num_levels - 1):
            raise ConfigError(f"T={T} too short for {self.num_levels} levels")
        x = frames.transpose(1, 2)  # (B, C_in, T)
        levels = [self.input_proj[0](x)]
        src = x
        for proj in self.input_proj[1:]:
            # chain on the pre-norm convolution output of the previous level
            src = proj[0](src)
            levels.append(proj[1](src))
        return FeaturePyramid([lvl.transpose(1, 2) for lvl in levels])


class PositionalEncoding(nn.Module):
    """Sinusoid of normalized position plus a learned per-level embedding."""

    def __init__(self, d_model: int, num_levels: int):
        super().__init__()
        if d_model % 2:
            raise ConfigError(f"d_model must be even, got {d_model}")
        self.d_model = d_model
        self.level_embed = nn.Parameter(torch.empty(num_levels, d_model))
        nn.init.normal_(self.level_embed, std=0.02)

    def forward(self, lengths: list[int], dtype=torch.float32) -> list[torch.Tensor]:
        return [sinusoidal_embedding(n, self.d_model).to(dtype) + self.level_embed[i].to(dtype)
                for i, n in enumerate(lengths)]


def positional_embedding(length: int, dim: int, level_embedding: torch.Tensor | None = None) -> torch.Tensor:
    emb = sinusoidal_embedding(length, dim)
    if level_embedding is not None:
        emb = emb + level_embedding.to(emb.dtype)
    return emb
