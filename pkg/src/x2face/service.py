"""HTTP inference service.

One process serves one checkpoint plus optionally fitted control maps.
Embedded faces live in an in-memory append-only store under unguessable
ids; every entry also keeps the first source frame (the "self frame"),
which supplies the source driving vector for pose and vector-delta
generation. Model weights and maps are immutable after startup, so
concurrent requests are safe and equivalent to serialized execution.

Images travel as PNG: multipart form uploads or base64 fields in JSON
bodies, interchangeably. Errors are JSON {code, message}.
"""

import base64
import binascii
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .control import (
    AudioToVecMap,
    PoseToVecMap,
    VecToPoseMap,
    load_map,
    pose_drive_vector,
    predict_pose,
)
from .editing import apply_overlay
from .errors import ControlMapError, X2FaceError
from .imgio import frame_to_base64, frame_to_png_bytes, png_bytes_to_frame, png_bytes_to_overlay
from .networks import (
    DrivingNetwork,
    EmbeddingNetwork,
    NetConfig,
    drive_decode,
    drive_encode,
    embed_multi,
)
from .ops import bilinear_resize

DEFAULT_TTL_SECONDS = 3600.0
DEFAULT_MAX_REQUEST_BYTES = 8 * 2**20


class ApiError(Exception):
    """Request-level failure carrying an HTTP status and an error code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class StoreEntry:
    """Immutable store record: the embedded face plus its self frame."""

    embedded: torch.Tensor
    self_frame: torch.Tensor
    created: float


class EmbeddedStore:
    """Append-only id -> embedded-face map with lazy TTL eviction.

    Ids carry 128 bits of entropy; entries are never mutated or replaced,
    so handlers can read them without copying. The clock is injectable for
    TTL tests.
    """

    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS, clock=time.monotonic):
        self._lock = threading.Lock()
        self._entries: dict[str, StoreEntry] = {}
        self.ttl_seconds = ttl_seconds
        self._clock = clock

    def put(self, embedded: torch.Tensor, self_frame: torch.Tensor) -> str:
        entry_id = secrets.token_hex(16)
        entry = StoreEntry(embedded.detach().clone(), self_frame.detach().clone(), self._clock())
        with self._lock:
            self._evict()
            self._entries[entry_id] = entry
        return entry_id

    def get(self, entry_id: str) -> StoreEntry:
        with self._lock:
            self._evict()
            entry = self._entries.get(entry_id)
        if entry is None:
            raise ApiError(404, "unknown-id", f"no embedded face with id {entry_id!r}")
        return entry

    def __len__(self) -> int:
        with self._lock:
            self._evict()
            return len(self._entries)

    def _evict(self) -> None:
        now = self._clock()
        dead = [k for k, e in self._entries.items() if now - e.created > self.ttl_seconds]
        for k in dead:
            del self._entries[k]


@dataclass
class ServiceMaps:
    f_vp: VecToPoseMap | None = None
    f_pv: PoseToVecMap | None = None
    f_av: AudioToVecMap | None = None

    @property
    def pose_ready(self) -> bool:
        return self.f_vp is not None and self.f_pv is not None


def load_service_maps(maps_dir) -> ServiceMaps:
    """Load whichever fitted maps exist in the directory; pose endpoints
    need both v_to_p.json and p_to_v.json."""
    maps_dir = Path(maps_dir)
    if not maps_dir.is_dir():
        raise ControlMapError(f"maps directory {maps_dir} does not exist")
    maps = ServiceMaps()
    for name, attr in (("v_to_p", "f_vp"), ("p_to_v", "f_pv"), ("a_to_v", "f_av")):
        path = maps_dir / f"{name}.json"
        if path.exists():
            setattr(maps, attr, load_map(path))
    return maps


def _decode_base64_png(field: str, value) -> bytes:
    if not isinstance(value, str):
        raise ApiError(400, "bad-request", f"{field} must be a base64 string")
    try:
        return base64.b64decode(value.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as e:
        raise ApiError(400, "bad-request", f"{field} is not valid base64: {e}") from e


def _decode_frame(raw: bytes, what: str) -> torch.Tensor:
    try:
        return png_bytes_to_frame(raw)
    except Exception as e:
        raise ApiError(400, "bad-image", f"cannot decode {what}: {e}") from e


def _decode_overlay(raw: bytes) -> torch.Tensor:
    try:
        return png_bytes_to_overlay(raw)
    except Exception as e:
        raise ApiError(400, "bad-image", f"cannot decode overlay: {e}") from e


async def _read_body(request: Request, max_bytes: int):
    """(form or None, json or None), enforcing the total size limit."""
    raw = await request.body()
    if len(raw) > max_bytes:
        raise ApiError(413, "too-large", f"request of {len(raw)} bytes exceeds the {max_bytes}-byte limit")
    content_type = request.headers.get("content-type", "")
    if content_type.startswith("multipart/form-data"):
        return await request.form(), None
    try:
        return None, await request.json()
    except Exception as e:
        raise ApiError(400, "bad-request", f"body is neither multipart nor JSON: {e}") from e


def _vector_of(payload, field: str, dim: int) -> np.ndarray:
    value = payload.get(field)
    if not isinstance(value, (list, tuple)) or len(value) != dim:
        raise ApiError(400, "bad-request", f"{field} must be an array of {dim} numbers")
    try:
        return np.asarray([float(x) for x in value], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ApiError(400, "bad-request", f"{field} must be an array of {dim} numbers") from e


def create_app(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    net_config: NetConfig,
    training_meta: dict,
    maps: ServiceMaps | None = None,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
    max_request_bytes: int = DEFAULT_MAX_REQUEST_BYTES,
    clock=time.monotonic,
) -> FastAPI:
    maps = maps or ServiceMaps()
    emb_net.eval()
    drv_net.eval()
    store = EmbeddedStore(ttl_seconds=ttl_seconds, clock=clock)
    resolution = net_config.resolution

    app = FastAPI(title="x2face", docs_url=None, redoc_url=None)
    app.state.store = store

    @app.exception_handler(ApiError)
    async def on_api_error(_request, exc: ApiError):
        return JSONResponse({"code": exc.code, "message": exc.message}, status_code=exc.status)

    @app.exception_handler(X2FaceError)
    async def on_domain_error(_request, exc: X2FaceError):
        return JSONResponse({"code": exc.code, "message": exc.message}, status_code=400)

    def resize_to_model(frame: torch.Tensor) -> torch.Tensor:
        if frame.shape[-2:] == (resolution, resolution):
            return frame
        return bilinear_resize(frame.unsqueeze(0), resolution, resolution)[0]

    def self_vector(entry: StoreEntry) -> np.ndarray:
        return drive_encode(drv_net, entry.self_frame).to(torch.float64).numpy()

    def generated_png(v: np.ndarray, embedded: torch.Tensor) -> Response:
        vec = torch.from_numpy(np.asarray(v, dtype=np.float64)).to(torch.float32)
        _, generated = drive_decode(drv_net, vec, embedded)
        return Response(content=frame_to_png_bytes(generated), media_type="image/png")

    @app.get("/health")
    async def health():
        return {
            "status": "ok",
            "model": {"resolution": resolution, "vector_dim": net_config.driving_vector_dim},
            "maps_loaded": maps.pose_ready,
        }

    @app.get("/model-info")
    async def model_info():
        return training_meta

    @app.post("/embed")
    async def embed(request: Request):
        form, payload = await _read_body(request, max_request_bytes)
        raws = []
        if form is not None:
            raws = [await f.read() for f in form.getlist("sources")]
        elif isinstance(payload, dict):
            items = payload.get("sources_base64", [])
            if not isinstance(items, list):
                raise ApiError(400, "bad-request", "sources_base64 must be a list")
            raws = [_decode_base64_png("sources_base64", s) for s in items]
        if not raws:
            raise ApiError(400, "bad-request", "need at least one source image")
        if sum(len(r) for r in raws) > max_request_bytes:
            raise ApiError(413, "too-large", f"sources exceed the {max_request_bytes}-byte limit")
        sources = [resize_to_model(_decode_frame(r, "source image")) for r in raws]
        embedded = embed_multi(emb_net, sources)
        entry_id = store.put(embedded, sources[0])
        out = {"embedded_id": entry_id, "png_base64": frame_to_base64(embedded)}
        if maps.pose_ready:
            entry = store.get(entry_id)
            out["predicted_pose"] = [float(x) for x in predict_pose(maps.f_vp, self_vector(entry))]
        return out

    @app.post("/generate")
    async def generate(request: Request):
        form, payload = await _read_body(request, max_request_bytes)
        if form is not None:
            fields = {k: form[k] for k in form if k != "driving"}
            mode = fields.get("mode")
            entry_id = fields.get("embedded_id")
        else:
            if not isinstance(payload, dict):
                raise ApiError(400, "bad-request", "body must be a JSON object")
            mode = payload.get("mode")
            entry_id = payload.get("embedded_id")
        if mode not in ("driving-image", "pose", "vector-delta"):
            raise ApiError(400, "bad-request", f"mode must be driving-image, pose, or vector-delta, got {mode!r}")
        if not isinstance(entry_id, str):
            raise ApiError(400, "bad-request", "embedded_id must be a string")
        entry = store.get(entry_id)

        if mode == "driving-image":
            if form is not None and "driving" in form:
                raw = await form["driving"].read()
            elif payload is not None and "driving_base64" in payload:
                raw = _decode_base64_png("driving_base64", payload["driving_base64"])
            else:
                raise ApiError(400, "bad-request", "driving-image mode needs a driving image")
            driving = resize_to_model(_decode_frame(raw, "driving image"))
            v = drive_encode(drv_net, driving).to(torch.float64).numpy()
            return generated_png(v, entry.embedded)

        if payload is None:
            raise ApiError(400, "bad-request", f"{mode} mode takes a JSON body")
        if mode == "pose":
            if not maps.pose_ready:
                raise ApiError(409, "maps-not-loaded", "pose mode needs fitted control maps at startup")
            pose = _vector_of(payload, "pose", maps.f_pv.weight.shape[1])
            v = pose_drive_vector(self_vector(entry), maps.f_pv, maps.f_vp, pose)
            return generated_png(v, entry.embedded)

        delta = _vector_of(payload, "vector_delta", net_config.driving_vector_dim)
        v = self_vector(entry) + delta
        return generated_png(v, entry.embedded)

    @app.post("/edit")
    async def edit(request: Request):
        form, payload = await _read_body(request, max_request_bytes)
        if form is not None:
            entry_id = form.get("embedded_id")
            if "overlay" not in form:
                raise ApiError(400, "bad-request", "need an overlay file")
            raw = await form["overlay"].read()
        else:
            if not isinstance(payload, dict):
                raise ApiError(400, "bad-request", "body must be a JSON object")
            entry_id = payload.get("embedded_id")
            if "overlay_base64" not in payload:
                raise ApiError(400, "bad-request", "need overlay_base64")
            raw = _decode_base64_png("overlay_base64", payload["overlay_base64"])
        if not isinstance(entry_id, str):
            raise ApiError(400, "bad-request", "embedded_id must be a string")
        entry = store.get(entry_id)
        overlay = _decode_overlay(raw)
        modified = apply_overlay(entry.embedded, overlay)
        new_id = store.put(modified, entry.self_frame)
        return {"embedded_id": new_id, "png_base64": frame_to_base64(modified)}

    return app
