"""HTTP JSON API for interactive sketching sessions.

Models are loaded once and shared read-only; per-session sketch mutation is
serialized with a per-session lock. Sessions expire after an idle timeout.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import selector as sel
from .embedder import EmbedNet
from .ranking import GalleryFeatures, rank
from .sketch import Point, Stroke, VectorSketch, rasterize

SCHEMA_VERSION = "1"


@dataclass
class ServiceRuntime:
    net: EmbedNet
    policy: sel.SelectorNet
    gallery: GalleryFeatures
    photos: np.ndarray  # (M, H, W) aligned with gallery.ids, for thumbnails
    canvas_h: int = 256
    canvas_w: int = 256
    line_width: int = 1
    tau: float = 0.2
    session_timeout_s: float = 30 * 60.0


@dataclass
class Session:
    id: str
    strokes: list[Stroke] = field(default_factory=list)
    pair_id: str | None = None
    last_access: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def sketch(self, canvas_h: int, canvas_w: int) -> VectorSketch:
        return VectorSketch(tuple(self.strokes), canvas_h, canvas_w)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"schema_version": SCHEMA_VERSION, "error": message},
    )


def _parse_points(body, canvas_h: int, canvas_w: int) -> list[Point] | str:
    """Validated point list from a request body; an error string otherwise."""
    if not isinstance(body, dict) or "points" not in body:
        return "body must be an object with a 'points' list"
    raw = body["points"]
    if not isinstance(raw, list) or len(raw) < 2:
        return "a stroke needs a list of at least 2 points"
    points = []
    for item in raw:
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            return f"bad point {item!r}"
        try:
            x, y = float(item[0]), float(item[1])
        except (TypeError, ValueError):
            return f"bad point {item!r}"
        if not (np.isfinite(x) and np.isfinite(y)):
            return f"non-finite point {item!r}"
        if not (0 <= x < canvas_w and 0 <= y < canvas_h):
            return f"point ({x}, {y}) outside the {canvas_h}x{canvas_w} canvas"
        points.append(Point(x, y))
    return points


def create_app(runtime: ServiceRuntime) -> FastAPI:
    app = FastAPI(title="sketchsift", version=SCHEMA_VERSION)
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    def get_session(session_id: str) -> Session | None:
        with registry_lock:
            session = sessions.get(session_id)
            if session is None:
                return None
            if time.monotonic() - session.last_access > runtime.session_timeout_s:
                del sessions[session_id]
                return None
            session.last_access = time.monotonic()
            return session

    def greedy_subset_raster(session: Session):
        sketch = session.sketch(runtime.canvas_h, runtime.canvas_w)
        out = sel.encode(runtime.policy, sketch)
        mask = sel.safe_greedy_mask(out.probs_array)
        from .sketch import apply_mask

        subset = apply_mask(sketch, mask)
        hw = runtime.net.config.input_hw
        return mask, rasterize(subset, hw, hw, runtime.line_width)

    @app.post("/session")
    async def create_session(request: Request):
        body = {}
        if int(request.headers.get("content-length") or 0) > 0:
            try:
                body = await request.json()
            except Exception:
                return _error(400, "malformed JSON body")
        pair_id = None
        if isinstance(body, dict) and body.get("pair_id") is not None:
            pair_id = str(body["pair_id"])
            if pair_id not in runtime.gallery.ids:
                return _error(400, f"unknown pair_id {pair_id!r}")
        session = Session(id=uuid.uuid4().hex, pair_id=pair_id)
        with registry_lock:
            sessions[session.id] = session
        return {
            "schema_version": SCHEMA_VERSION,
            "id": session.id,
            "pair_id": pair_id,
            "canvas_h": runtime.canvas_h,
            "canvas_w": runtime.canvas_w,
            "threshold": runtime.tau,
        }

    @app.delete("/session/{session_id}")
    async def delete_session(session_id: str):
        with registry_lock:
            if session_id not in sessions:
                return _error(404, "unknown session")
            del sessions[session_id]
        return {"schema_version": SCHEMA_VERSION, "deleted": True}

    @app.post("/session/{session_id}/stroke")
    async def append_stroke(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "malformed JSON body")
        points = _parse_points(body, runtime.canvas_h, runtime.canvas_w)
        if isinstance(points, str):
            return _error(400, points)
        with session.lock:
            session.strokes.append(Stroke(tuple(points)))
            sketch = session.sketch(runtime.canvas_h, runtime.canvas_w)
            score = sel.critic_score(runtime.policy, sketch)
            k = sketch.stroke_count
        return {"schema_version": SCHEMA_VERSION, "k": k, "critic_score": score}

    @app.get("/session/{session_id}/score")
    async def session_score(session_id: str):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        with session.lock:
            if not session.strokes:
                return _error(409, "sketch is empty")
            sketch = session.sketch(runtime.canvas_h, runtime.canvas_w)
        score = sel.critic_score(runtime.policy, sketch)
        return {
            "schema_version": SCHEMA_VERSION,
            "critic_score": score,
            "threshold": runtime.tau,
            "feed_recommended": bool(score >= runtime.tau),
        }

    @app.post("/session/{session_id}/select")
    async def session_select(session_id: str):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        with session.lock:
            if not session.strokes:
                return _error(409, "sketch is empty")
            sketch = session.sketch(runtime.canvas_h, runtime.canvas_w)
        out = sel.encode(runtime.policy, sketch)
        mask = sel.safe_greedy_mask(out.probs_array)
        return {
            "schema_version": SCHEMA_VERSION,
            "mask": ["select" if b else "ignore" for b in mask.bits],
            "k_selected": mask.selected_count,
        }

    @app.post("/session/{session_id}/retrieve")
    async def session_retrieve(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, "unknown session")
        top_k = 5
        if int(request.headers.get("content-length") or 0) > 0:
            try:
                body = await request.json()
            except Exception:
                return _error(400, "malformed JSON body")
            if isinstance(body, dict) and "top_k" in body:
                try:
                    top_k = int(body["top_k"])
                except (TypeError, ValueError):
                    return _error(400, f"bad top_k {body['top_k']!r}")
                if top_k < 1:
                    return _error(400, "top_k must be >= 1")
        with session.lock:
            if not session.strokes:
                return _error(409, "sketch is empty")
            mask, raster = greedy_subset_raster(session)
            pair_id = session.pair_id
        emb = runtime.net.embed(raster.pixels[None])[0]
        distances = np.sqrt(((runtime.gallery.features - emb[None, :]) ** 2).sum(axis=1))
        order = np.argsort(distances, kind="stable")[:top_k]
        results = [
            {
                "photo_id": runtime.gallery.ids[i],
                "distance": float(distances[i]),
                "is_paired": (runtime.gallery.ids[i] == pair_id) if pair_id else False,
            }
            for i in order
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "results": results,
            "k_selected": mask.selected_count,
            "mask": ["select" if b else "ignore" for b in mask.bits],
        }

    @app.get("/meta")
    async def meta():
        return {
            "schema_version": SCHEMA_VERSION,
            "gallery_size": runtime.gallery.size,
            "canvas_h": runtime.canvas_h,
            "canvas_w": runtime.canvas_w,
            "threshold": runtime.tau,
            "photo_hw": runtime.net.config.input_hw,
        }

    @app.get("/gallery")
    async def gallery_ids():
        return {"schema_version": SCHEMA_VERSION, "ids": list(runtime.gallery.ids)}

    @app.get("/photo/{photo_id}")
    async def photo(photo_id: str):
        if photo_id not in runtime.gallery.ids:
            return _error(404, f"unknown photo {photo_id!r}")
        idx = runtime.gallery.index_of(photo_id)
        levels = np.clip(np.round(runtime.photos[idx] * 255), 0, 255).astype(int)
        return {
            "schema_version": SCHEMA_VERSION,
            "photo_id": photo_id,
            "h": int(levels.shape[0]),
            "w": int(levels.shape[1]),
            "pixels": levels.tolist(),
        }

    return app


def runtime_from_config(cfg) -> ServiceRuntime:
    """Build the service runtime from a RunConfig's artifacts."""
    from . import pipeline
    from .embedder import load_checkpoint as load_embed
    from .selector import load_checkpoint as load_selector
    from .synth import load_dataset

    dataset = load_dataset(pipeline.dataset_dir(cfg))
    net = load_embed(pipeline.embed_ckpt_path(cfg).read_bytes())
    policy = load_selector(pipeline.selector_ckpt_path(cfg).read_bytes())
    _, photos, ids = dataset.load_split(cfg.serve.gallery_split)
    gallery = GalleryFeatures(net.embed(photos), ids)
    return ServiceRuntime(
        net=net,
        policy=policy,
        gallery=gallery,
        photos=photos,
        canvas_h=cfg.data.canvas,
        canvas_w=cfg.data.canvas,
        line_width=cfg.line_width,
        tau=cfg.serve.tau,
        session_timeout_s=cfg.serve.session_timeout_min * 60.0,
    )
