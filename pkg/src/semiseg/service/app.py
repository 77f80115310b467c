"""FastAPI application wrapping the training package.

Errors map onto status codes the CLI translates into exit codes: argument
and configuration problems become 400 (usage), numeric failures and anything
unexpected become 500 (runtime).
"""

from __future__ import annotations

import math
import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import data as dat
from .. import evaluate as ev
from .. import model as mod
from .. import train as tr
from ..config import config_from_dict, config_hash, finish_manifest, write_manifest
from ..errors import ArgumentError, ConfigurationError, ContractViolation, NumericError, UndefinedMetricError
from . import schemas as sc

_USAGE_ERRORS = (ArgumentError, ConfigurationError, UndefinedMetricError)
_RUNTIME_ERRORS = (NumericError, ContractViolation)


def _split_ids(index: dat.DatasetIndex, split_dir: str) -> tuple[list[int], list[int]]:
    by_path = {it.image: i for i, it in enumerate(index.items)}
    labeled_lines, unlabeled_lines = dat.read_split_files(split_dir)
    try:
        labeled = [by_path[img] for img, _ in labeled_lines]
        unlabeled = [by_path[img] for img in unlabeled_lines]
    except KeyError as e:
        raise ArgumentError(f"split references unknown image {e.args[0]!r}")
    return labeled, unlabeled


def create_app() -> FastAPI:
    app = FastAPI(title="semiseg", version=__version__)

    @app.exception_handler(Exception)
    async def on_unexpected(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": f"{type(exc).__name__}: {exc}"})

    async def on_usage(request: Request, exc: Exception):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    async def on_runtime(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    for err in _USAGE_ERRORS:
        app.add_exception_handler(err, on_usage)
    for err in _RUNTIME_ERRORS:
        app.add_exception_handler(err, on_runtime)

    @app.get("/health", response_model=sc.HealthResponse)
    def health():
        return sc.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=sc.SynthResponse)
    def synth(req: sc.SynthRequest):
        if os.path.isdir(req.out_dir) and os.listdir(req.out_dir) and not req.overwrite:
            raise ArgumentError(f"{req.out_dir} exists and is not empty; pass overwrite to replace it")
        index = dat.synth_dataset(
            req.out_dir, req.items, req.size, req.classes, req.seed, hq_fraction=req.hq_fraction
        )
        return sc.SynthResponse(out_dir=req.out_dir, n_items=len(index), num_classes=index.num_classes)

    @app.post("/split", response_model=sc.SplitResponse)
    def split(req: sc.SplitRequest):
        index = dat.DatasetIndex.from_dir(req.data_dir)
        n = req.n_labeled
        if req.protocol != "fraction":
            if n != int(n):
                raise ArgumentError("n_labeled must be an integer for this protocol")
            n = int(n)
        spec = dat.SplitSpec(protocol=req.protocol, n_labeled=n, seed=req.seed)
        labeled, unlabeled = dat.make_splits(index, spec)
        out_dir = req.out_dir or os.path.join(
            req.data_dir, "splits", f"{req.protocol}_{req.n_labeled:g}_{req.seed}"
        )
        dat.write_split_files(index, labeled, unlabeled, out_dir)
        return sc.SplitResponse(split_dir=out_dir, n_labeled=len(labeled), n_unlabeled=len(unlabeled))

    @app.post("/train", response_model=sc.TrainResponse)
    def train(req: sc.TrainRequest):
        index = dat.DatasetIndex.from_dir(req.data_dir)
        labeled, unlabeled = _split_ids(index, req.split_dir)
        cfg = config_from_dict(req.config or {})
        write_manifest(req.out_dir, cfg, req.command or "POST /train")
        ckpt, metrics, history = tr.run_training(cfg, index, labeled, unlabeled, req.out_dir)
        finish_manifest(req.out_dir)
        return sc.TrainResponse(
            out_dir=req.out_dir,
            checkpoint=ckpt,
            metrics=metrics,
            steps=len(history),
            final=history[-1] if history else {},
            config_hash=config_hash(cfg),
        )

    @app.post("/evaluate", response_model=sc.EvalResponse)
    def evaluate(req: sc.EvalRequest):
        if not os.path.exists(req.checkpoint):
            raise ArgumentError(f"checkpoint not found: {req.checkpoint}")
        if req.subset not in ("all", "labeled", "unlabeled"):
            raise ArgumentError(f"unknown subset {req.subset!r}")
        index = dat.DatasetIndex.from_dir(req.data_dir)
        net, meta = mod.load_checkpoint(req.checkpoint)
        ids = None
        if req.subset != "all":
            if not req.split_dir:
                raise ArgumentError("subset evaluation needs split_dir")
            labeled, unlabeled = _split_ids(index, req.split_dir)
            ids = labeled if req.subset == "labeled" else unlabeled
        result = ev.evaluate_index(net, index, ids=ids, window=req.window, stride=req.stride)
        report_path = req.report
        if report_path:
            ev.write_report(result, report_path, meta={"checkpoint": req.checkpoint, "data": req.data_dir})
        per_class = [None if (isinstance(v, float) and math.isnan(v)) else v for v in result["per_class_iou"]]
        extras = {k: result[k] for k in ("changed_iou", "overall_accuracy") if k in result}
        return sc.EvalResponse(
            miou=result["miou"],
            per_class_iou=per_class,
            n_items=result["n_items"],
            report=report_path,
            extras=extras,
        )

    return app
