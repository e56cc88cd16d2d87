"""HTTP query service.

Serves registered scene bundles to thin clients: temporal query answering,
RGB / relevancy renders as PNG, raw depth as tensor blobs, and background
highlight jobs. All numerics happen server-side; the scene registry is
read-only after startup and the only shared mutable state is the insert-once
query cache and the job table.

A scene bundle is a directory holding a distilled scene (`scene.json` at the
top or under `scene/`), a codec (`codec.json` + `codec/`), and optionally a
query dictionary (`queries.json` + `embeddings/`), per-phrase canonical sets
(`gt.json`), and a default canonical matrix (`canonicals.4leg`).
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from PIL import Image

from .blobs import encode_blob, read_blob
from .codec import CodecParams, load_codec
from .embedders import ENV_EMBEDDER_URL, TextEmbeddingError, load_query_dictionary, resolve_text_embedding
from .highlights import HighlightError, HighlightSpec, render_highlight
from .query import CanonicalSet, QueryEmbedding, localize, spatial_map, temporal_curve
from .raster import render
from .scene import Camera, DynamicScene, camera_to_json, load_scene


class ServiceError(RuntimeError):
    pass


# Polynomial fit of the turbo rainbow colormap, evaluated over [0, 1].
_TURBO_COEFFS = np.array([
    [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943],
    [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604],
    [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973],
])


def turbo_colormap(values: np.ndarray) -> np.ndarray:
    """(…) scores in [0, 1] -> (…, 3) uint8 turbo-style colors."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    powers = np.stack([v ** k for k in range(6)], axis=-1)
    rgb = powers @ _TURBO_COEFFS.T
    return (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)


@dataclass
class SceneBundle:
    scene: DynamicScene
    codec: CodecParams
    dictionary: dict[str, np.ndarray] = field(default_factory=dict)
    canonical_table: dict[str, np.ndarray] = field(default_factory=dict)
    default_canonicals: Optional[np.ndarray] = None

    def camera(self, camera_id: str | int) -> Optional[Camera]:
        for cam in self.scene.cameras:
            if str(cam.cam_id) == str(camera_id):
                return cam
        return None


def load_bundle(root: str | Path) -> SceneBundle:
    root = Path(root)
    if (root / "scene.json").exists():
        scene_dir = root
    elif (root / "scene" / "scene.json").exists():
        scene_dir = root / "scene"
    else:
        raise ServiceError(f"no scene.json under {root} or {root}/scene")
    scene = load_scene(scene_dir)
    if not (root / "codec.json").exists():
        raise ServiceError(f"bundle {root} has no codec.json")
    codec = load_codec(root)

    dictionary = {}
    if (root / "queries.json").exists():
        dictionary = load_query_dictionary(root / "queries.json")

    canonical_table: dict[str, np.ndarray] = {}
    if (root / "gt.json").exists():
        gt = json.loads((root / "gt.json").read_text())
        concept_vecs = {name: read_blob(root / "embeddings" / f"concept_{i}.4leg")
                        for i, name in enumerate(gt.get("concepts", []))}
        for phrase, names in gt.get("canonicals", {}).items():
            canonical_table[phrase] = np.stack([concept_vecs[c] for c in names])

    default_canonicals = None
    if (root / "canonicals.4leg").exists():
        default_canonicals = np.atleast_2d(read_blob(root / "canonicals.4leg"))
    return SceneBundle(scene=scene, codec=codec, dictionary=dictionary,
                       canonical_table=canonical_table,
                       default_canonicals=default_canonicals)


def load_bundles(root: str | Path) -> dict[str, SceneBundle]:
    """Registers `root` itself if it is a bundle, else every bundle subdir."""
    root = Path(root)
    candidates = [root]
    if not (root / "scene.json").exists() and not (root / "scene").is_dir():
        candidates = sorted(p for p in root.iterdir() if p.is_dir())
    bundles: dict[str, SceneBundle] = {}
    for path in candidates:
        try:
            bundle = load_bundle(path)
        except ServiceError:
            continue
        name = bundle.scene.name
        if name in bundles:
            raise ServiceError(f"duplicate scene name '{name}' under {root}")
        bundles[name] = bundle
    if not bundles:
        raise ServiceError(f"no scene bundles under {root}")
    return bundles


@dataclass
class QueryRecord:
    """Everything a later render or highlight needs to reproduce one query."""
    scene_id: str
    query: QueryEmbedding
    canonicals: CanonicalSet
    dilation: int
    response: dict


def _query_id(scene_id: str, embedding: np.ndarray, canonicals: np.ndarray,
              dilation: int) -> str:
    h = hashlib.sha256()
    h.update(scene_id.encode())
    h.update(np.ascontiguousarray(embedding, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(canonicals, dtype=np.float32).tobytes())
    h.update(str(int(dilation)).encode())
    return h.hexdigest()[:16]


def _segments_json(segments) -> list[dict]:
    return [{"t_start": s.t_start, "t_end": s.t_end, "peak": s.peak}
            for s in segments]


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


class QueryService:
    def __init__(self, bundles: dict[str, SceneBundle]):
        if not bundles:
            raise ServiceError("at least one scene bundle is required")
        self.bundles = bundles
        self._cache: dict[str, QueryRecord] = {}
        self._cache_lock = threading.Lock()
        self._jobs: dict[str, dict] = {}
        self._jobs_lock = threading.Lock()

    # -- query ------------------------------------------------------------

    def _bundle_or_404(self, scene_id: str) -> SceneBundle:
        bundle = self.bundles.get(scene_id)
        if bundle is None:
            raise HTTPException(404, f"unknown scene '{scene_id}'")
        return bundle

    def _resolve_vector(self, bundle: SceneBundle, body: dict) -> tuple[np.ndarray, Optional[str]]:
        text = body.get("text")
        embedding = body.get("embedding")
        if (text is None) == (embedding is None):
            raise HTTPException(400, "exactly one of 'text' / 'embedding' is required")
        if text is not None:
            try:
                vec = resolve_text_embedding(text, bundle.dictionary or None,
                                             os.environ.get(ENV_EMBEDDER_URL))
            except TextEmbeddingError as exc:
                raise HTTPException(400, str(exc)) from exc
            return np.asarray(vec, dtype=np.float32), text
        vec = np.asarray(embedding, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
            raise HTTPException(400, "embedding must be a nonempty flat list of finite floats")
        return vec, None

    def _resolve_canonicals(self, bundle: SceneBundle, body: dict,
                            text: Optional[str]) -> np.ndarray:
        override = body.get("canonicals")
        if override is not None:
            canon = np.atleast_2d(np.asarray(override, dtype=np.float32))
            if canon.size == 0 or not np.all(np.isfinite(canon)):
                raise HTTPException(400, "canonicals must be a nonempty matrix of finite floats")
            return canon
        if text is not None and text in bundle.canonical_table:
            return bundle.canonical_table[text]
        if bundle.default_canonicals is not None:
            return bundle.default_canonicals
        raise HTTPException(400, "no canonical embeddings: pass 'canonicals' "
                                 "or register a bundle default")

    def _answer(self, scene_id: str, bundle: SceneBundle, vec: np.ndarray,
                canon: np.ndarray, dilation: int) -> QueryRecord:
        qid = _query_id(scene_id, vec, canon, dilation)
        record = self._cache.get(qid)
        if record is not None:
            return record
        try:
            query = QueryEmbedding(vec)
            canonicals = CanonicalSet(canon)
            volume = temporal_curve(bundle.scene, bundle.codec, query, canonicals)
            segments, primary = localize(volume, dilation_radius=dilation)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        response = {
            "query_id": qid,
            "scene": scene_id,
            "s_curve": [float(v) for v in volume.s],
            "segments": _segments_json(segments),
            "primary": _segments_json([primary])[0] if primary else None,
            "score": float(volume.s.max()) if volume.s.size else 0.0,
        }
        record = QueryRecord(scene_id=scene_id, query=query, canonicals=canonicals,
                             dilation=dilation, response=response)
        with self._cache_lock:
            return self._cache.setdefault(qid, record)

    def query(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise HTTPException(400, "request body must be a JSON object")
        dilation = int(body.get("dilation", 2))
        if dilation < 0:
            raise HTTPException(400, "dilation must be >= 0")
        scene_id = body.get("scene")
        if scene_id is not None:
            bundle = self._bundle_or_404(scene_id)
            vec, text = self._resolve_vector(bundle, body)
            canon = self._resolve_canonicals(bundle, body, text)
            return self._answer(scene_id, bundle, vec, canon, dilation).response

        # no scene named: answer from every bundle, return the best score
        records = {}
        for sid, bundle in self.bundles.items():
            vec, text = self._resolve_vector(bundle, body)
            canon = self._resolve_canonicals(bundle, body, text)
            records[sid] = self._answer(sid, bundle, vec, canon, dilation)
        best = max(records, key=lambda sid: (records[sid].response["score"],
                                             -list(records).index(sid)))
        response = dict(records[best].response)
        response["scores"] = {sid: rec.response["score"]
                              for sid, rec in records.items()}
        return response

    # -- renders ----------------------------------------------------------

    def _frame_camera(self, scene_id: str, t: int, camera_id: str):
        bundle = self._bundle_or_404(scene_id)
        if not 0 <= t < bundle.scene.num_timesteps:
            raise HTTPException(400, f"t must be in [0, {bundle.scene.num_timesteps})")
        cam = bundle.camera(camera_id)
        if cam is None:
            raise HTTPException(404, f"unknown camera '{camera_id}'")
        return bundle, cam

    def render_png(self, scene_id: str, t: int, camera_id: str, mode: str,
                   query_id: Optional[str]) -> bytes:
        bundle, cam = self._frame_camera(scene_id, t, camera_id)
        if mode == "rgb":
            out = render(bundle.scene.frames[t], cam, channels=("rgb",))
            img = (np.clip(out["rgb"], 0.0, 1.0) * 255.0).round().astype(np.uint8)
            return _png_bytes(img)
        if mode == "relevancy":
            if query_id is None:
                raise HTTPException(400, "mode=relevancy requires query_id")
            record = self._cache.get(query_id)
            if record is None:
                raise HTTPException(404, f"unknown query id '{query_id}'")
            if record.scene_id != scene_id:
                raise HTTPException(400, "query id belongs to a different scene")
            try:
                scores = spatial_map(bundle.scene, t, cam, bundle.codec,
                                     record.query, record.canonicals)
            except ValueError as exc:
                raise HTTPException(400, str(exc)) from exc
            return _png_bytes(turbo_colormap(scores))
        raise HTTPException(400, f"unknown mode '{mode}'")

    def depth_blob(self, scene_id: str, t: int, camera_id: str) -> bytes:
        bundle, cam = self._frame_camera(scene_id, t, camera_id)
        out = render(bundle.scene.frames[t], cam, channels=("depth",))
        return encode_blob(out["depth"].astype(np.float32))

    # -- highlights -------------------------------------------------------

    def submit_highlight(self, body: dict) -> dict:
        scene_id = body.get("scene")
        if scene_id is None:
            raise HTTPException(400, "scene is required")
        bundle = self._bundle_or_404(scene_id)
        query_id = body.get("query_id")
        record = self._cache.get(query_id) if query_id else None
        if record is None:
            raise HTTPException(404, f"unknown query id '{query_id}'")
        if record.scene_id != scene_id:
            raise HTTPException(400, "query id belongs to a different scene")
        if record.response["primary"] is None:
            raise HTTPException(409, "query not localizable: empty localization")
        try:
            spec = HighlightSpec(
                effect=body.get("effect", "bullet_time"),
                zoom_factor=float(body.get("zoom_factor", 2.0)),
                orbit_degrees=float(body.get("orbit_degrees", 60.0)),
                frame_count=int(body.get("frames", 12)),
                strength=float(body.get("strength", 1.0)))
        except (HighlightError, ValueError) as exc:
            raise HTTPException(400, str(exc)) from exc

        job_id = uuid.uuid4().hex[:12]
        with self._jobs_lock:
            self._jobs[job_id] = {"status": "pending", "frames": [], "error": None}

        def run() -> None:
            try:
                frames, _ = render_highlight(
                    bundle.scene, bundle.codec, record.query, record.canonicals,
                    spec, dilation_radius=record.dilation)
                encoded = [base64.b64encode(_png_bytes(f)).decode("ascii")
                           for f in frames]
                with self._jobs_lock:
                    self._jobs[job_id].update(status="done", frames=encoded)
            except Exception as exc:  # noqa: BLE001 - job boundary records failures
                with self._jobs_lock:
                    self._jobs[job_id].update(status="error", error=str(exc))

        threading.Thread(target=run, daemon=True).start()
        return {"job_id": job_id}

    def job_status(self, job_id: str) -> dict:
        with self._jobs_lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise HTTPException(404, f"unknown job '{job_id}'")
            return dict(job)


def build_app(scenes_root: str | Path | dict[str, SceneBundle]) -> FastAPI:
    bundles = (scenes_root if isinstance(scenes_root, dict)
               else load_bundles(scenes_root))
    service = QueryService(bundles)
    app = FastAPI(title="legs4", docs_url=None, redoc_url=None)
    app.state.service = service

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "scenes": len(service.bundles)}

    @app.get("/scenes")
    def scenes() -> dict:
        return {"scenes": [
            {"id": sid,
             "timesteps": b.scene.num_timesteps,
             "fps": b.scene.fps,
             "cameras": [camera_to_json(c) for c in b.scene.cameras],
             "queries": sorted(b.dictionary)}
            for sid, b in service.bundles.items()]}

    @app.post("/query")
    async def query(request: Request) -> dict:
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise HTTPException(400, f"malformed JSON: {exc}") from exc
        return service.query(body)

    @app.get("/render")
    def render_endpoint(scene: str, t: int, camera: str, mode: str = "rgb",
                        query_id: Optional[str] = None) -> Response:
        png = service.render_png(scene, t, camera, mode, query_id)
        return Response(content=png, media_type="image/png")

    @app.get("/depth")
    def depth(scene: str, t: int, camera: str) -> Response:
        blob = service.depth_blob(scene, t, camera)
        return Response(content=blob, media_type="application/octet-stream")

    @app.post("/highlight")
    async def highlight(request: Request) -> dict:
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise HTTPException(400, f"malformed JSON: {exc}") from exc
        return service.submit_highlight(body)

    @app.get("/highlight/{job_id}")
    def highlight_status(job_id: str) -> dict:
        return service.job_status(job_id)

    return app
