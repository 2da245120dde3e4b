"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConfigRequest(_Model):
    config: str | None = Field(None, description="path to a JSON or YAML config file")
    overrides: dict[str, Any] = Field(default_factory=dict, description="dotted keys, e.g. optim.lr")


class GenerateRequest(ConfigRequest):
    output: str | None = None


class GenerateResponse(_Model):
    videos: int
    events: int
    vocab_size: int
    train: int
    val: int
    path: str


class TrainRequest(ConfigRequest):
    resume: str | None = None
    init_checkpoint: str | None = None


class JobStatus(_Model):
    job_id: str
    state: Literal["pending", "running", "succeeded", "failed"]
    result: dict[str, Any] | None = None
    error: str | None = None
    epochs_done: int = 0


class InlineFeatures(_Model):
    video_id: str
    duration: float = Field(gt=0)
    features: list[list[float]]


class PredictRequest(_Model):
    checkpoint: str
    features: str | None = Field(None, description="feature file, directory or corpus directory")
    inline: list[InlineFeatures] | None = None
    proposals: dict[str, list[tuple[float, float]]] | None = Field(
        None, description="paragraph mode: video_id -> [[start, end], ...] in seconds")
    video_ids: list[str] | None = None


class PredictedEvent(_Model):
    sentence: str
    timestamp: tuple[float, float]
    confidence: float


class PredictResponse(_Model):
    mode: Literal["dense", "paragraph"]
    results: dict[str, list[PredictedEvent]]
    warnings: list[str] = Field(default_factory=list)


class EvaluateRequest(_Model):
    predictions: dict[str, Any] | str
    annotations: str | list[str]


class ErrorResponse(_Model):
    error: str
    message: str
