"""Run configuration. Every section rejects unknown keys."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    T: int = Field(64, ge=2, description="fixed rescale length")
    d_model: int = Field(64, ge=2)
    n_heads: int = Field(4, ge=1)
    n_levels: int = Field(4, ge=1)
    n_points: int = Field(4, ge=1)
    enc_layers: int = Field(2, ge=0)
    dec_layers: int = Field(2, ge=1)
    d_ffn: int = Field(256, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    num_queries: int = Field(10, ge=1)
    max_count: int = Field(10, ge=1)
    caption_head: Literal["light", "dsa"] = "light"
    caption_hidden: int = Field(128, ge=1)
    word_embed: int = Field(64, ge=1)
    max_caption_len: int = Field(20, ge=2)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal embedding")
        if self.T < 2 ** (self.n_levels - 1):
            raise ValueError(f"T={self.T} too small for {self.n_levels} pyramid levels")
        return self


class MatcherConfig(_Section):
    alpha_giou: float = Field(2.0, ge=0)
    alpha_cls: float = Field(1.0, ge=0)
    # caption-cost matching (weak supervision)
    caption_alpha_cls: float = Field(0.5, ge=0)
    caption_gamma: float = Field(2.0, ge=0)


class LossConfig(_Section):
    beta_giou: float = Field(2.0, ge=0)
    beta_cls: float = Field(1.0, ge=0)
    beta_ec: float = Field(1.0, ge=0)
    beta_cap: float = Field(1.0, ge=0)
    focal_alpha: float = Field(0.25, ge=0, le=1)
    focal_gamma: float = Field(2.0, ge=0)


class RankingConfig(_Section):
    gamma: float = Field(2.0, ge=0)
    mu: float = Field(0.3, ge=0)


class OptimConfig(_Section):
    lr: float = Field(5e-5, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(1, ge=1)
    grad_accum: int = Field(1, ge=1)
    epochs: int = Field(30, ge=1)
    grad_clip: float = Field(1.0, ge=0)
    lr_drop_epoch: int | None = None
    feature_noise: float = Field(0.0, ge=0, description="std of Gaussian jitter added to frames while training")
    temporal_flip: float = Field(0.0, ge=0, le=1, description="probability of reversing a training video in time")
    temporal_crop: float = Field(0.0, ge=0, le=1,
                                 description="probability of cropping background around the events and rescaling")


class SynthConfig(_Section):
    n_videos: int = Field(500, ge=1)
    t_raw_min: int = Field(48, ge=1)
    t_raw_max: int = Field(96, ge=1)
    c_in: int = Field(32, ge=1)
    min_events: int = Field(1, ge=1)
    max_events: int = Field(5, ge=1)
    num_classes: int = Field(12, ge=1)
    min_length: float = Field(0.05, gt=0, le=1)
    max_length: float = Field(0.45, gt=0, le=1)
    max_overlap: float = Field(0.1, ge=0, lt=1, description="max shared fraction of the shorter segment")
    noise: float = Field(0.6, ge=0)
    signal: float = Field(1.0, ge=0)
    duration_min: float = Field(30.0, gt=0)
    duration_max: float = Field(180.0, gt=0)
    holdout: int = Field(100, ge=0, description="videos reserved for the validation split")
    catalog_seed: int = Field(0, description="seeds the class/attribute feature signatures")

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.t_raw_min > self.t_raw_max:
            raise ValueError("t_raw_min > t_raw_max")
        if self.min_events > self.max_events:
            raise ValueError("min_events > max_events")
        if self.min_length > self.max_length:
            raise ValueError("min_length > max_length")
        if self.duration_min > self.duration_max:
            raise ValueError("duration_min > duration_max")
        return self


class RunConfig(_Section):
    seed: int = 0
    deterministic: bool = False
    weak_supervision: bool = False
    paragraph: bool = False
    data_dir: str = "corpus"
    run_dir: str = "runs/default"
    model: ModelConfig = ModelConfig()
    matcher: MatcherConfig = MatcherConfig()
    loss: LossConfig = LossConfig()
    ranking: RankingConfig = RankingConfig()
    optim: OptimConfig = OptimConfig()
    synth: SynthConfig = SynthConfig()

    @field_validator("model", "matcher", "loss", "ranking", "optim", "synth", mode="before")
    @classmethod
    def _none_to_default(cls, v):
        return {} if v is None else v

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a JSON or YAML config and apply dotted-key overrides (``"optim.lr": 1e-3``)."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        data = data or {}
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.model_validate(data)


def parse_override(item: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as JSON when possible."""
    if "=" not in item:
        raise ValueError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
