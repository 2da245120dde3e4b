"""Command line: ``densecap {generate,train,predict,evaluate,info,serve}``.

Commands run in-process by default. With ``--server URL`` they are sent to a
running ``densecap serve`` instance instead.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import load_config, parse_override


def _overrides(args) -> dict[str, Any]:
    out = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "deterministic", False):
        out["deterministic"] = True
    if getattr(args, "weak_supervision", False):
        out["weak_supervision"] = True
    if getattr(args, "paragraph", False) and args.command == "train":
        out["paragraph"] = True
    if args.command == "generate" and args.output:
        out["data_dir"] = args.output
    if args.command == "train":
        if args.data:
            out["data_dir"] = args.data
        if args.output:
            out["run_dir"] = args.output
    return out


def _emit(obj: Any, output: str | None) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=1)
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text + "\n")
    else:
        print(text)


def _remote(args, path: str, payload: dict) -> dict:
    import httpx

    r = httpx.post(args.server.rstrip("/") + path, json=payload, timeout=None)
    body = r.json()
    if r.status_code >= 400:
        raise RuntimeError(body.get("message") or body.get("detail") or str(body))
    return body


def cmd_generate(args) -> None:
    if args.server:
        body = _remote(args, "/generate", {"config": args.config, "overrides": _overrides(args), "output": args.output})
    else:
        from .ops import run_generate

        body = run_generate(load_config(args.config, _overrides(args)))
    print(json.dumps(body, indent=1))


def cmd_train(args) -> None:
    if args.server:
        import httpx

        job = _remote(args, "/train", {"config": args.config, "overrides": _overrides(args),
                                       "resume": args.resume, "init_checkpoint": args.init_from})
        url = f"{args.server.rstrip('/')}/jobs/{job['job_id']}"
        while job["state"] in ("pending", "running"):
            time.sleep(args.poll)
            job = httpx.get(url).json()
        if job["state"] == "failed":
            raise RuntimeError(job["error"])
        body = job["result"]
    else:
        from .ops import run_train

        body = run_train(load_config(args.config, _overrides(args)), args.resume, args.init_from)
    print(json.dumps(body, indent=1))


def cmd_predict(args) -> None:
    if args.paragraph and not args.proposals:
        raise ValueError("--paragraph needs --proposals <file>")
    if args.proposals and not args.paragraph:
        raise ValueError("--proposals is only used with --paragraph")
    if args.server:
        props = json.loads(Path(args.proposals).read_text()) if args.proposals else None
        if props is not None:
            from .ops import load_proposals

            props = load_proposals(props)
        body = _remote(args, "/predict", {"checkpoint": str(Path(args.checkpoint).resolve()),
                                          "features": str(Path(args.features).resolve()),
                                          "proposals": props, "video_ids": args.video})
    else:
        from .ops import run_predict

        body = run_predict(args.checkpoint, args.features, args.proposals, args.video)
    for w in body.get("warnings", []):
        logging.warning(w)
    _emit(body, args.output)


def cmd_evaluate(args) -> None:
    if args.server:
        preds = json.loads(Path(args.predictions).read_text())
        anns = [str(Path(a).resolve()) for a in args.annotations]
        body = _remote(args, "/evaluate", {"predictions": preds, "annotations": anns})
        from .metrics import EvalReport

        report = EvalReport.model_validate(body)
    else:
        from .ops import run_evaluate

        report = run_evaluate(args.predictions, args.annotations)
    _emit(report.table() if args.format == "table" else report.model_dump_json(indent=1), args.output)


def cmd_info(args) -> None:
    from .checkpoint import read_checkpoint

    payload = read_checkpoint(args.checkpoint)
    n_params = sum(t.numel() for t in payload["state_dict"].values())
    st = payload["train_state"] or {}
    print(json.dumps({"format": payload["format"], "version": payload["version"], **payload["model_meta"],
                      "parameters": n_params, "epoch": st.get("epoch"), "best_score": st.get("best_score"),
                      "config": json.loads(payload["config"])}, indent=1))


def cmd_serve(args) -> None:
    import uvicorn

    uvicorn.run("densecap.service.app:app", host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densecap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--server", help="send the command to a running service at this URL")
        if config:
            sp.add_argument("--config", help="JSON or YAML run config")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--deterministic", action="store_true", help="single-threaded deterministic numerics")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. optim.lr=1e-4")

    g = sub.add_parser("generate", help="write a synthetic corpus")
    common(g)
    g.add_argument("--output", help="corpus directory (default: data_dir from config)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a corpus")
    common(t)
    t.add_argument("--data", help="corpus directory (default: data_dir from config)")
    t.add_argument("--output", help="run directory for checkpoints and the training log")
    t.add_argument("--weak-supervision", action="store_true", help="caption-only matching, fixed sampling points")
    t.add_argument("--paragraph", action="store_true", help="train the captioner on ground-truth proposals")
    t.add_argument("--resume", help="continue from a last.pt checkpoint")
    t.add_argument("--init-from", help="initialize weights from a checkpoint (non-strict)")
    t.add_argument("--poll", type=float, default=2.0, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="caption videos from feature files")
    common(pr, config=False)
    pr.add_argument("checkpoint")
    pr.add_argument("--features", required=True, help="feature file, directory or corpus directory")
    pr.add_argument("--paragraph", action="store_true", help="caption given proposals instead of detecting events")
    pr.add_argument("--proposals", help="JSON file: video_id -> [[start, end], ...] in seconds")
    pr.add_argument("--video", action="append", help="restrict to these video ids")
    pr.add_argument("--output", help="prediction JSON path (default: stdout)")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against annotations")
    common(e, config=False)
    e.add_argument("--predictions", required=True)
    e.add_argument("--annotations", required=True, action="append",
                   help="annotation JSON; repeat for several annotation sets")
    e.add_argument("--format", choices=("json", "table"), default="json")
    e.add_argument("--output")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("info", help="describe a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_info)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
