#!/usr/bin/env python3
import math
import os
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import HTMLResponse
from pydantic import BaseModel

from twinid_config import read_json
from twinid_inference import ModelEvidence, select_models
from twinid_kernels import SpaceTimeGrid
from twinid_likelihood import MODEL_CATALOG, ProbModelSpec, choose_path, loglik_lanes
from twinid_memory import RunLedger
from twinid_shared import LEDGER_PATH, N_DENSE_MAX, TwinIDError, logger

try:
    import psutil
except ImportError:
    psutil = None

app = FastAPI(title="TwinID API", version="1.0")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)


class LoglikRequest(BaseModel):
    shorthand: str
    theta: Dict[str, float]
    x_coords: List[float]
    t_coords: List[float]
    y_obs: List[float]
    y_model: List[float]
    n_lanes: int = 1
    n_dense_max: int = N_DENSE_MAX


class EvidenceEntry(BaseModel):
    shorthand: str
    logz: float
    logz_err: float = 0.0
    nfe: int = 0
    reference: bool = False


class SelectRequest(BaseModel):
    models: List[EvidenceEntry]
    prior_probs: Optional[List[float]] = None


def get_ledger() -> RunLedger:
    return RunLedger(LEDGER_PATH)


def _finite_or_none(value):
    return value if isinstance(value, (int, str, bool)) or (value is not None and math.isfinite(value)) else None


@app.get("/", response_class=HTMLResponse)
async def root():
    mem_usage = "N/A"
    if psutil:
        process = psutil.Process(os.getpid())
        mem_usage = f"{process.memory_info().rss / 1024 / 1024:.0f} MB"
    total_runs = get_ledger().count_runs()
    models = ", ".join(MODEL_CATALOG)
    return f"""
    <html>
        <head><title>TwinID API</title></head>
        <body style="font-family: monospace; background: #111; color: #e0e0e0; padding: 40px;">
            <h1>TwinID API Online</h1>
            <p>Models: {models}</p>
            <p>Recorded runs: {total_runs}</p>
            <p>Memory: {mem_usage}</p>
        </body>
    </html>
    """


@app.get("/api/system/status")
async def system_status_endpoint():
    mem_percent = 0
    cpu_percent = 0
    if psutil:
        mem = psutil.virtual_memory()
        mem_percent = mem.percent
        cpu_percent = psutil.cpu_percent(interval=None)
    return {"memory": mem_percent, "cpu": cpu_percent}


@app.get("/api/runs")
async def runs_endpoint(limit: int = 20):
    return {"runs": get_ledger().list_runs(limit)}


@app.get("/api/runs/{run_id}")
async def run_endpoint(run_id: str):
    run = get_ledger().get_run(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"run {run_id} not found")
    for result in run["results"]:
        archive = result.get("archive_path")
        if archive and Path(archive).exists():
            result["summary"] = read_json(archive).get("summary")
    return run


@app.post("/api/loglik")
async def loglik_endpoint(req: LoglikRequest):
    try:
        spec = ProbModelSpec.from_shorthand(req.shorthand, req.theta)
        grid = SpaceTimeGrid(np.array(req.x_coords), np.array(req.t_coords))
        expected = req.n_lanes * grid.size
        if len(req.y_obs) != expected or len(req.y_model) != expected:
            raise HTTPException(status_code=400, detail=f"y_obs and y_model must have length {expected}")
        path = choose_path(spec, grid, req.n_dense_max)
        value = loglik_lanes(np.array(req.y_obs), np.array(req.y_model), spec, grid, req.n_lanes, req.n_dense_max)
    except TwinIDError as e:
        logger.info(f"loglik request rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    return {"loglik": _finite_or_none(value), "path": path.value, "N": expected}


@app.post("/api/select")
async def select_endpoint(req: SelectRequest):
    entries = [ModelEvidence(m.shorthand.upper(), m.logz, m.logz_err, m.nfe, m.reference) for m in req.models]
    try:
        report = select_models(entries, req.prior_probs)
    except TwinIDError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return {
        "best": report.best.shorthand if report.best else None,
        "models": [{
            "shorthand": m.shorthand,
            "reference": m.reference,
            "logz": m.logz,
            "logz_err": m.logz_err,
            "nfe": m.nfe,
            "posterior_prob": _finite_or_none(m.posterior_prob),
            "bayes_factor_vs_best": _finite_or_none(m.bayes_factor_vs_best),
            "jeffreys_label": m.jeffreys_label,
        } for m in report.models],
    }
