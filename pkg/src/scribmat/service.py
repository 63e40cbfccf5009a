"""HTTP service exposing interactive matting sessions.

Sessions live in an in-memory store with TTL eviction; requests to the
same session are serialized, distinct sessions proceed in parallel.
Mutating endpoints honor an Idempotency-Key header: retries with the same
key return the recorded response instead of re-applying the mutation.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, File, Form, Header, HTTPException, Response
from PIL import Image as PILImage
from pydantic import BaseModel, Field

from . import session as sessmod
from .labelstate import ScribbleConflictError, STROKE_COLORS, rasterize_stroke, strokes_from_wire
from .markovprop import PropagationError
from .mattesolver import MattingError

SESSION_TTL_SECONDS = 3600.0
MAX_IMAGE_SIDE = 4096


class RegionRect(BaseModel):
    x0: int
    y0: int
    x1: int
    y1: int


class SessionResource(BaseModel):
    id: str
    status: str
    iteration: int
    rounds: int
    suggested_region: RegionRect | None = None
    ready_to_finalize: bool = False
    warnings: list[str] = Field(default_factory=list)
    urls: dict[str, str] = Field(default_factory=dict)


class StrokePayload(BaseModel):
    class_: str = Field(alias="class")
    radius: int = 3
    points: list[list[int]]
    region: int = -1
    iteration: int = 0

    model_config = {"populate_by_name": True}


class ScribbleRequest(BaseModel):
    strokes: list[StrokePayload]


class FinalizeRequest(BaseModel):
    early: bool = False


class FinalizeResponse(BaseModel):
    id: str
    status: str
    cnn_skipped: str | None = None
    urls: dict[str, str]


class _Entry:
    def __init__(self, session):
        self.session = session
        self.lock = threading.Lock()
        self.touched = time.monotonic()
        self.idempotency: dict[str, dict] = {}

    def touch(self):
        self.touched = time.monotonic()


class SessionStore:
    def __init__(self, ttl=SESSION_TTL_SECONDS):
        self.ttl = ttl
        self._entries: dict[str, _Entry] = {}
        self._lock = threading.Lock()

    def put(self, session):
        sid = uuid.uuid4().hex
        session.session_id = sid
        with self._lock:
            self._evict_expired()
            self._entries[sid] = _Entry(session)
        return sid

    def get(self, sid):
        with self._lock:
            self._evict_expired()
            entry = self._entries.get(sid)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        entry.touch()
        return entry

    def delete(self, sid):
        with self._lock:
            if sid not in self._entries:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            del self._entries[sid]

    def _evict_expired(self):
        now = time.monotonic()
        dead = [k for k, e in self._entries.items() if now - e.touched > self.ttl]
        for k in dead:
            del self._entries[k]


def _session_urls(sid):
    base = f"/sessions/{sid}"
    return {
        "self": base,
        "overlay": f"{base}/overlay.png",
        "trimap": f"{base}/trimap.png",
        "alpha": f"{base}/alpha.png",
    }


def _resource(session):
    region = None
    if session.current_region is not None:
        r = session.grid.rects[session.current_region]
        region = RegionRect(x0=int(r[0]), y0=int(r[1]), x1=int(r[2]), y1=int(r[3]))
    return SessionResource(
        id=session.session_id,
        status=session.phase.value,
        iteration=session.iteration,
        rounds=session.cfg.rounds,
        suggested_region=region,
        ready_to_finalize=session.iteration >= session.cfg.rounds,
        warnings=list(session.warnings),
        urls=_session_urls(session.session_id),
    )


def _png_response(array_u8, mode="L"):
    buf = io.BytesIO()
    PILImage.fromarray(array_u8, mode=mode).save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def render_overlay(session):
    """Input image with superpixel boundaries, the suggested region frame
    and all applied strokes in their class colors."""
    img = (session.image * 255).round().astype(np.uint8).copy()
    labels = session.sp.labels
    boundary = np.zeros(labels.shape, dtype=bool)
    boundary[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    boundary[1:, :] |= labels[1:, :] != labels[:-1, :]
    img[boundary] = (0.55 * img[boundary] + 0.45 * 255).astype(np.uint8)

    if session.current_region is not None:
        x0, y0, x1, y1 = session.grid.rects[session.current_region]
        frame = np.zeros(labels.shape, dtype=bool)
        t = 2
        frame[y0 : y0 + t, x0:x1] = True
        frame[max(y1 - t, 0) : y1, x0:x1] = True
        frame[y0:y1, x0 : x0 + t] = True
        frame[y0:y1, max(x1 - t, 0) : x1] = True
        img[frame] = (255, 220, 0)

    h, w = labels.shape
    for stroke in session.strokes:
        mask = rasterize_stroke(stroke, w, h)
        img[mask] = STROKE_COLORS[stroke.label]
    return img


def create_app(store=None):
    app = FastAPI(title="scribmat", version="0.1.0")
    app.state.store = store or SessionStore()

    @app.post("/sessions", response_model=SessionResource, status_code=201)
    def create_session(image: bytes = File(...), config: str = Form(default="{}")):
        try:
            with PILImage.open(io.BytesIO(image)) as im:
                im = im.convert("RGB")
                if im.width > MAX_IMAGE_SIDE or im.height > MAX_IMAGE_SIDE:
                    raise HTTPException(
                        status_code=413,
                        detail=f"image exceeds {MAX_IMAGE_SIDE}x{MAX_IMAGE_SIDE}",
                    )
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except HTTPException:
            raise
        except Exception as exc:
            raise HTTPException(status_code=422, detail=f"undecodable image: {exc}")
        try:
            cfg = sessmod.SessionConfig.from_dict(json.loads(config) if config else {})
        except (ValueError, json.JSONDecodeError) as exc:
            raise HTTPException(status_code=422, detail=f"bad config: {exc}")
        session = sessmod.create_session(arr, cfg)
        app.state.store.put(session)
        return _resource(session)

    @app.get("/sessions/{sid}", response_model=SessionResource)
    def get_session(sid: str):
        entry = app.state.store.get(sid)
        with entry.lock:
            return _resource(entry.session)

    @app.post("/sessions/{sid}/scribbles", response_model=SessionResource)
    def post_scribbles(
        sid: str,
        body: ScribbleRequest,
        idempotency_key: str | None = Header(default=None),
    ):
        entry = app.state.store.get(sid)
        with entry.lock:
            if idempotency_key and idempotency_key in entry.idempotency:
                return SessionResource(**entry.idempotency[idempotency_key])
            session = entry.session
            if session.phase != sessmod.Phase.AWAITING_SCRIBBLES:
                raise HTTPException(
                    status_code=409,
                    detail=f"session in phase {session.phase.value} does not accept scribbles",
                )
            try:
                strokes = strokes_from_wire(
                    [s.model_dump(by_alias=True) for s in body.strokes]
                )
                sessmod.submit_scribbles(session, strokes)
            except ScribbleConflictError as exc:
                raise HTTPException(
                    status_code=422,
                    detail={"error": str(exc), "superpixel": exc.superpixel},
                )
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            resource = _resource(session)
            if idempotency_key:
                entry.idempotency[idempotency_key] = resource.model_dump()
            return resource

    @app.post("/sessions/{sid}/finalize", response_model=FinalizeResponse)
    def finalize(
        sid: str,
        body: FinalizeRequest | None = None,
        idempotency_key: str | None = Header(default=None),
    ):
        entry = app.state.store.get(sid)
        with entry.lock:
            if idempotency_key and idempotency_key in entry.idempotency:
                return FinalizeResponse(**entry.idempotency[idempotency_key])
            session = entry.session
            early = bool(body and body.early)
            try:
                result = sessmod.finalize(session, early=early)
            except sessmod.PhaseError as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            except (MattingError, PropagationError) as exc:
                raise HTTPException(status_code=422, detail=f"finalize failed: {exc}")
            response = FinalizeResponse(
                id=sid,
                status=session.phase.value,
                cnn_skipped=result.cnn_skipped,
                urls=_session_urls(sid),
            )
            if idempotency_key:
                entry.idempotency[idempotency_key] = response.model_dump()
            return response

    @app.get("/sessions/{sid}/trimap.png")
    def get_trimap(sid: str):
        entry = app.state.store.get(sid)
        with entry.lock:
            session = entry.session
            if session.result is None:
                raise HTTPException(status_code=409, detail="session not finalized")
            return _png_response(session.result.trimap)

    @app.get("/sessions/{sid}/alpha.png")
    def get_alpha(sid: str):
        entry = app.state.store.get(sid)
        with entry.lock:
            session = entry.session
            if session.result is None:
                raise HTTPException(status_code=409, detail="session not finalized")
            alpha = (session.result.alpha * 255).round().astype(np.uint8)
            return _png_response(alpha)

    @app.get("/sessions/{sid}/overlay.png")
    def get_overlay(sid: str):
        entry = app.state.store.get(sid)
        with entry.lock:
            return _png_response(render_overlay(entry.session), mode="RGB")

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        app.state.store.delete(sid)
        return Response(status_code=204)

    return app


app = create_app()
