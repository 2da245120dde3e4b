"""Checkpoint archive.

A checkpoint is a single ``torch.save`` zip archive holding one dict:

``format``       the string ``"densecap-checkpoint"``
``version``      integer layout version (currently 1)
``config``       the full run configuration as a JSON string
``model_meta``   ``{"c_in", "vocab_size", "weak", "paragraph"}``
``vocab``        the token list, ids in order
``state_dict``   parameter and buffer tensors keyed by hierarchical module names
``optimizer``    optimizer state or ``None``
``train_state``  ``{"epoch", "step", "best_score", "rng_state", "torch_rng_state", "history"}`` or ``None``

Tensors are stored as-is, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import torch

from .config import RunConfig
from .model import DenseCaptioner
from .text import Vocabulary

FORMAT = "densecap-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, model: DenseCaptioner, cfg: RunConfig, vocab: Vocabulary,
                    optimizer: torch.optim.Optimizer | None = None, train_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "config": cfg.to_json(),
        "model_meta": {"c_in": model.c_in, "vocab_size": model.vocab_size, "weak": model.weak,
                       "paragraph": model.paragraph},
        "vocab": list(vocab.itos),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_state": train_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a densecap checkpoint")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_model(path: str | Path) -> tuple[DenseCaptioner, RunConfig, Vocabulary]:
    payload = read_checkpoint(path)
    cfg = RunConfig.model_validate(json.loads(payload["config"]))
    meta = payload["model_meta"]
    model = DenseCaptioner(cfg.model, meta["c_in"], meta["vocab_size"], weak=meta["weak"], paragraph=meta["paragraph"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, Vocabulary(payload["vocab"])
