"""HTTP service for interactive tuning of a loaded checkpoint.

The checkpoint is immutable; requests only read it. A bounded LRU cache
keyed by (pair, hyperparameters) memoizes registration payloads. One
background tune job may run at a time; /api/register never waits on it.
"""
from __future__ import annotations

import base64
import threading
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import deform
from . import model as mdl
from .grid import load_dataset
from .losses import hard_dice
from .networks import load_checkpoint
from .tune import TuneConfig, tune_auto, tune_scoped

CACHE_SIZE = 32
GRID_STRIDE = 4


def _b64_image(arr: np.ndarray) -> dict:
    """Row-major 8-bit grayscale with dims."""
    u8 = np.clip(arr * 255.0, 0, 255).astype(np.uint8)
    return {"height": int(u8.shape[0]), "width": int(u8.shape[1]),
            "data": base64.b64encode(u8.tobytes()).decode()}


def _grid_polylines(disp: np.ndarray, stride: int = GRID_STRIDE) -> list:
    """Deformed-grid polylines: every `stride`-th row and column mapped
    through phi(p) = p + u(p). Points are [x, y] pairs."""
    _, h, w = disp.shape
    lines = []
    for r in range(0, h, stride):
        xs = np.arange(w) + disp[0, r, :]
        ys = r + disp[1, r, :]
        lines.append(np.stack([xs, ys], axis=1).round(2).tolist())
    for c in range(0, w, stride):
        xs = c + disp[0, :, c]
        ys = np.arange(h) + disp[1, :, c]
        lines.append(np.stack([xs, ys], axis=1).round(2).tolist())
    return lines


class RegisterRequest(BaseModel):
    pair_id: int
    lam: float
    gamma: float | None = None
    ws: int | None = None


class TuneRequest(BaseModel):
    pair_ids: list[int] | None = None
    scope: str | None = None


class Session:
    def __init__(self, ckpt_path, data_path, split="val"):
        self.ckpt = load_checkpoint(ckpt_path)
        self.digest = self.ckpt.digest()
        self.data = load_dataset(data_path)
        self.split = split
        self.pairs = self.data.subset(split) or self.data.records
        self.cache = OrderedDict()
        self.cache_lock = threading.Lock()
        self.tune_lock = threading.Lock()
        self.jobs = {}
        self.next_job = 1

    def pair(self, pair_id: int):
        if not 0 <= pair_id < len(self.pairs):
            raise HTTPException(404, f"unknown pair {pair_id}")
        return self.pairs[pair_id]

    def hyperparams(self, req: RegisterRequest):
        overrides = {"lam": req.lam}
        if req.gamma is not None:
            overrides["gamma"] = req.gamma
        if req.ws is not None:
            overrides["ncc_window"] = req.ws
        try:
            hp = self.ckpt.hyperparams(**overrides)
            hp.validate()
        except (TypeError, ValueError) as e:
            raise HTTPException(400, f"hyperparameters out of range: {e}")
        return hp

    def register(self, req: RegisterRequest) -> dict:
        hp = self.hyperparams(req)
        key = (req.pair_id, hp.lam, hp.gamma, hp.ncc_window)
        with self.cache_lock:
            if key in self.cache:
                self.cache.move_to_end(key)
                return self.cache[key]
        pair = self.pair(req.pair_id)
        t0 = time.perf_counter()
        reg = mdl.register_pairs(self.ckpt, [pair], hp)
        ms = 1000.0 * (time.perf_counter() - t0)
        fg = [l for l in pair.fixed_seg.label_set if l != 0]
        diff = np.abs(reg.warped[0] - pair.fixed.data)
        payload = {
            "pair_id": req.pair_id,
            "lam": hp.lam, "gamma": hp.gamma, "ws": hp.ncc_window,
            "warped": _b64_image(reg.warped[0]),
            "difference": _b64_image(diff),
            "warped_labels": _b64_image(reg.warped_labels[0]
                                        / max(1, max(fg))),
            "grid": _grid_polylines(reg.disp[0]),
            "dice": {str(l): float(d) for l, d in zip(fg, reg.dice[0])},
            "dice_mean": float(reg.dice[0].mean()),
            "mean_disp": float(reg.mean_disp[0]),
            "negdet_frac": float(reg.negdet_frac[0]),
            "ms": ms,
        }
        with self.cache_lock:
            self.cache[key] = payload
            while len(self.cache) > CACHE_SIZE:
                self.cache.popitem(last=False)
        return payload

    def start_tune(self, req: TuneRequest) -> dict:
        pairs = ([self.pair(i) for i in req.pair_ids] if req.pair_ids
                 else self.pairs)
        if any(p.fixed_seg is None or p.moving_seg is None for p in pairs):
            raise HTTPException(422, "tuning pairs lack segmentations")
        if not self.tune_lock.acquire(blocking=False):
            raise HTTPException(409, "a tune job is already running")
        job_id = self.next_job
        self.next_job += 1
        job = {"id": job_id, "status": "queued", "result": None, "error": None}
        self.jobs[job_id] = job

        def work():
            job["status"] = "running"
            try:
                if req.scope:
                    results = tune_scoped(self.ckpt, self.data, req.scope,
                                          TuneConfig(), split=self.split)
                    job["result"] = [r.__dict__ for r in results]
                else:
                    res = tune_auto(self.ckpt, pairs, TuneConfig())
                    job["result"] = res.__dict__
                job["status"] = "done"
            except Exception as e:  # noqa: BLE001 - job boundary
                job["error"] = str(e)
                job["status"] = "failed"
            finally:
                self.tune_lock.release()

        threading.Thread(target=work, daemon=True).start()
        return {"job_id": job_id, "status": job["status"]}


def create_app(ckpt_path, data_path, split="val",
               static_dir=None) -> FastAPI:
    session = Session(ckpt_path, data_path, split)
    app = FastAPI(title="hyperreg")
    app.state.session = session
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(Exception)
    async def crash_guard(request, exc):
        return JSONResponse(status_code=400,
                            content={"detail": f"bad request: {exc}"})

    @app.get("/api/meta")
    def meta():
        hp_meta = []
        defaults = session.ckpt.fixed_hp
        for name in session.ckpt.active:
            if name in ("lam", "gamma"):
                hp_meta.append({"name": name, "kind": "continuous",
                                "min": 0.0, "max": 1.0,
                                "default": defaults[name]})
            else:
                hp_meta.append({"name": name, "kind": "discrete",
                                "values": [3, 5, 7, 9, 11, 13, 15],
                                "default": defaults[name]})
        p0 = session.pairs[0]
        return {"hyperparameters": hp_meta,
                "pair_ids": list(range(len(session.pairs))),
                "height": p0.fixed.height, "width": p0.fixed.width,
                "labels": [l for l in p0.fixed_seg.label_set if l != 0],
                "metric": session.ckpt.metric,
                "checkpoint_digest": session.digest}

    @app.post("/api/register")
    def register(req: RegisterRequest):
        payload = session.register(req)
        if session.ckpt.digest() != session.digest:
            raise HTTPException(500, "checkpoint mutated")
        return payload

    @app.post("/api/tune")
    def tune(req: TuneRequest):
        return session.start_tune(req)

    @app.get("/api/tune/{job_id}")
    def tune_status(job_id: int):
        job = session.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job

    @app.get("/api/pair/{pair_id}")
    def pair(pair_id: int):
        p = session.pair(pair_id)
        return {"pair_id": pair_id,
                "moving": _b64_image(p.moving.data),
                "fixed": _b64_image(p.fixed.data),
                "moving_seg": _b64_image(p.moving_seg.labels.astype(np.float32)
                                         / max(1, max(p.moving_seg.label_set))),
                "fixed_seg": _b64_image(p.fixed_seg.labels.astype(np.float32)
                                        / max(1, max(p.fixed_seg.label_set))),
                "subpopulation": p.subpopulation, "task": p.task}

    if static_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        static_dir = bundled if bundled.is_dir() else None
    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")
    return app
