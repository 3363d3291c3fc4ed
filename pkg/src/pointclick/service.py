"""Interactive segmentation service.

Stateful sessions over HTTP: a session pins a scene and a model; every click
mutation re-runs the full single forward pass and bumps the revision. Model
parameters are shared read-only across sessions; a per-session lock keeps
mutations strictly serial. An SSE channel pushes (revision, result) after
each mutation.

Endpoints:
    GET  /models
    POST /sessions                      {scene | scene_id, model}
    POST /sessions/{id}/clicks          {add: [{x,y,z,group}], remove: [int]}
    GET  /sessions/{id}/result
    GET  /sessions/{id}/scene
    GET  /sessions/{id}/log
    GET  /sessions/{id}/events          (server-sent events)

Environment: POINTCLICK_MODEL_DIR and POINTCLICK_SCENE_DIR point at the
checkpoint and scene-file directories.
"""

from __future__ import annotations

import asyncio
import json
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from starlette.concurrency import run_in_threadpool

from . import io as pio
from .geometry import PointCloud
from .model import ModelParams, load_checkpoint
from .pipeline import SegmentationResult, segment
from .sampling import ClickSet

MODEL_DIR_ENV = "POINTCLICK_MODEL_DIR"
SCENE_DIR_ENV = "POINTCLICK_SCENE_DIR"


class ModelRegistry:
    def __init__(self, model_dir=None):
        self.model_dir = Path(model_dir or os.environ.get(MODEL_DIR_ENV, "models"))
        self._cache: dict[str, ModelParams] = {}

    def list(self) -> list:
        if not self.model_dir.is_dir():
            return sorted(self._cache)
        found = {p.stem for p in self.model_dir.glob("*.npz")}
        return sorted(found | set(self._cache))

    def add(self, model_id: str, model: ModelParams):
        self._cache[model_id] = model

    def get(self, model_id: str) -> ModelParams:
        if model_id not in self._cache:
            path = self.model_dir / f"{model_id}.npz"
            if not path.is_file():
                raise KeyError(model_id)
            self._cache[model_id] = load_checkpoint(path)
        return self._cache[model_id]


@dataclass
class Session:
    id: str
    scene: PointCloud
    model_id: str
    clicks: list = field(default_factory=list)      # dicts {x,y,z,group}
    result: SegmentationResult | None = None
    revision: int = 0
    log: list = field(default_factory=list)          # mutation bodies, in order
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)
    subscribers: list = field(default_factory=list)  # asyncio queues


def _click_set(clicks: list) -> ClickSet:
    coords = np.array([[c["x"], c["y"], c["z"]] for c in clicks], dtype=np.float64)
    groups = np.array([int(c["group"]) for c in clicks], dtype=np.int64)
    return ClickSet(clicks=coords, instance_group=groups)


def apply_mutation(session: Session, model: ModelParams, add: list, remove: list):
    """Mutate the click set and run one forward pass. Pure of service plumbing."""
    clicks = [c for i, c in enumerate(session.clicks) if i not in set(remove)]
    for c in add:
        clicks.append({"x": float(c["x"]), "y": float(c["y"]),
                       "z": float(c["z"]), "group": int(c["group"])})
    session.clicks = clicks
    session.log.append({"add": list(add), "remove": list(remove)})
    session.revision += 1
    if not clicks:
        session.result = None
        return None
    session.result = segment(session.scene, _click_set(clicks), model)
    return session.result


def _result_payload(session: Session) -> dict:
    body = {"revision": session.revision, "clicks": session.clicks}
    body["result"] = pio.result_to_dict(session.result) if session.result else None
    return body


def create_app(registry: ModelRegistry | None = None, scene_dir=None) -> FastAPI:
    registry = registry or ModelRegistry()
    scene_dir = Path(scene_dir or os.environ.get(SCENE_DIR_ENV, "scenes"))
    sessions: dict[str, Session] = {}
    app = FastAPI(title="pointclick")
    app.state.registry = registry
    app.state.sessions = sessions

    def _session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return sessions[sid]

    @app.get("/models")
    def list_models():
        return {"models": registry.list()}

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        model_id = body.get("model")
        try:
            registry.get(model_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown model {model_id!r}")
        if "scene" in body:
            try:
                cloud, _, _ = pio.scene_from_dict(body["scene"])
            except (ValueError, KeyError, TypeError) as e:
                raise HTTPException(status_code=422, detail=f"malformed scene: {e}")
        elif "scene_id" in body:
            path = scene_dir / f"{body['scene_id']}.json"
            if not path.is_file():
                raise HTTPException(status_code=404, detail="unknown scene_id")
            cloud, _, _ = pio.load_scene(path)
        else:
            raise HTTPException(status_code=422, detail="scene or scene_id required")
        sid = uuid.uuid4().hex
        sessions[sid] = Session(id=sid, scene=cloud, model_id=model_id)
        return {"session_id": sid, "revision": 0, "n_points": cloud.n_points}

    @app.post("/sessions/{sid}/clicks")
    async def post_clicks(sid: str, body: dict):
        session = _session(sid)
        add = body.get("add", [])
        remove = body.get("remove", [])
        for c in add:
            if not all(k in c for k in ("x", "y", "z", "group")):
                raise HTTPException(status_code=422, detail="click needs x,y,z,group")
        async with session.lock:
            if remove and max(remove, default=-1) >= len(session.clicks):
                raise HTTPException(status_code=422, detail="remove index out of range")
            model = registry.get(session.model_id)
            await run_in_threadpool(apply_mutation, session, model, add, remove)
            payload = _result_payload(session)
            for q in session.subscribers:
                q.put_nowait(payload)
        return payload

    @app.get("/sessions/{sid}/result")
    def get_result(sid: str):
        return _result_payload(_session(sid))

    @app.get("/sessions/{sid}/scene")
    def get_scene(sid: str):
        return pio.scene_to_dict(_session(sid).scene)

    @app.get("/sessions/{sid}/log")
    def get_log(sid: str):
        session = _session(sid)
        return {"revision": session.revision, "log": session.log}

    @app.get("/sessions/{sid}/events")
    async def events(sid: str, request: Request):
        session = _session(sid)
        queue: asyncio.Queue = asyncio.Queue()
        session.subscribers.append(queue)

        async def stream():
            try:
                yield f"data: {json.dumps(_result_payload(session))}\n\n"
                while True:
                    if await request.is_disconnected():
                        break
                    try:
                        payload = await asyncio.wait_for(queue.get(), timeout=1.0)
                    except asyncio.TimeoutError:
                        continue
                    yield f"data: {json.dumps(payload)}\n\n"
            finally:
                session.subscribers.remove(queue)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def serve(host: str = "127.0.0.1", port: int = 8008, model_dir=None, scene_dir=None):
    import uvicorn

    app = create_app(ModelRegistry(model_dir), scene_dir=scene_dir)
    uvicorn.run(app, host=host, port=port)
