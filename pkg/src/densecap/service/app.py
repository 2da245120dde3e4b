"""FastAPI application. Training runs as a background job polled via ``/jobs/{id}``."""
from __future__ import annotations

import threading
import traceback
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from .. import __version__, ops
from ..config import RunConfig, load_config
from ..features import FrameFeatureSequence
from ..metrics import EvalReport
from .schemas import (ConfigRequest, EvaluateRequest, GenerateRequest, GenerateResponse, JobStatus,
                      PredictRequest, PredictResponse, TrainRequest)


def _config(req: ConfigRequest) -> RunConfig:
    return load_config(req.config, req.overrides)


def create_app() -> FastAPI:
    app = FastAPI(title="densecap", version=__version__)
    jobs: dict[str, JobStatus] = {}
    lock = threading.Lock()

    @app.exception_handler(ValidationError)
    async def _invalid(_: Request, exc: ValidationError):
        return JSONResponse(status_code=422, content={"error": "ValidationError", "message": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def _missing(_: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=404, content={"error": "FileNotFoundError", "message": str(exc)})

    @app.exception_handler(ValueError)
    async def _bad(_: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"error": type(exc).__name__, "message": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        return ops.run_generate(_config(req), req.output)

    @app.post("/train", response_model=JobStatus, status_code=202)
    def train(req: TrainRequest):
        cfg = _config(req)
        job = JobStatus(job_id=uuid.uuid4().hex[:12], state="pending")
        jobs[job.job_id] = job

        def work():
            with lock:  # one training job at a time
                job.state = "running"
                try:
                    job.result = ops.run_train(cfg, req.resume, req.init_checkpoint)
                    job.epochs_done = job.result["epochs"]
                    job.state = "succeeded"
                except Exception as exc:  # reported through the job record
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.result = {"traceback": traceback.format_exc()}
                    job.state = "failed"

        threading.Thread(target=work, daemon=True).start()
        return job

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str):
        if job_id not in jobs:
            raise HTTPException(404, f"unknown job {job_id}")
        return jobs[job_id]

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        if (req.features is None) == (req.inline is None):
            raise ValueError("give exactly one of 'features' (a path) or 'inline' feature arrays")
        if req.features is not None:
            seqs = [ops.read_feature_file(f) for f in ops.feature_files(req.features)]
            if req.video_ids:
                seqs = [s for s in seqs if s.video_id in set(req.video_ids)]
        else:
            seqs = [FrameFeatureSequence(np.asarray(x.features, dtype=np.float32), x.duration, x.video_id)
                    for x in req.inline]
        props = None
        if req.proposals is not None:
            props = {k: [tuple(p) for p in v] for k, v in req.proposals.items()}
            seqs = [s for s in seqs if s.video_id in props]
        return ops.predict_sequences(req.checkpoint, seqs, props)

    @app.post("/evaluate", response_model=EvalReport)
    def evaluate(req: EvaluateRequest):
        return ops.run_evaluate(req.predictions, req.annotations)

    return app


app = create_app()
