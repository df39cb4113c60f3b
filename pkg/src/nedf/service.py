"""Interactive composition server.

Holds one live scene. HTTP PUTs edit object transforms, lights and the
camera; every accepted edit bumps a revision counter and wakes a render
worker. The worker always renders the latest state (edits arriving during a
render coalesce), reusing cached per-object depth planes so that moving one
object re-traces only that object. Finished frames fan out to WebSocket
subscribers as PNG messages with a small binary header; a pull endpoint
returns single frames. Slow subscribers drop old frames rather than queueing
without bound, and edits are never blocked on rendering.
"""

from __future__ import annotations

import json
import logging
import queue
import struct
import threading
from contextlib import asynccontextmanager

import anyio
import numpy as np
from fastapi import Body, FastAPI, HTTPException, Response, WebSocket, WebSocketDisconnect

from . import imgio
from .errors import SceneValidationError
from .pipeline import FrameBuffers, compose_frame
from .scene import SceneDescription, dumps_scene, parse_transform

log = logging.getLogger(__name__)

BUFFER_KINDS = {"color": 0, "depth": 1, "id": 2, "shadow": 3}
ENCODING_PNG = 0
HEADER_FMT = "<IBBHII"  # revision, buffer kind, encoding, reserved, W, H
DEFAULT_PORT = 7870


class Subscriber:
    """One stream consumer: a bounded mailbox that keeps only the newest
    frame when the consumer lags."""

    def __init__(self, kind: str):
        self.kind = kind
        self.mailbox: queue.Queue = queue.Queue(maxsize=1)

    def offer(self, frame: bytes) -> None:
        while True:
            try:
                self.mailbox.put_nowait(frame)
                return
            except queue.Full:
                try:
                    self.mailbox.get_nowait()
                except queue.Empty:
                    pass


class Session:
    """Live scene state under a single lock; the render worker takes
    snapshots and never holds the lock while rendering."""

    def __init__(self, desc: SceneDescription):
        self.desc = desc
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.revision = 0
        self.rendered_revision = -1
        self.instances = desc.instantiate()
        self.camera = desc.camera()
        self.lights = desc.build_lights()
        self.config = desc.render_config()
        self.dirty: set[int] = set()
        self.full_dirty = True  # nothing cached yet
        self.buffers: FrameBuffers | None = None
        self.latest: dict | None = None  # planes of the last finished frame
        self.last_render_info: dict = {}
        self.subscribers: list[Subscriber] = []
        self.stop = False

    # -- edits (caller holds no lock) --

    def set_transform(self, object_id: int, payload: dict) -> int:
        qt = parse_transform(payload, "transform")
        with self.cond:
            for spec, inst in zip(self.desc.objects, self.instances):
                if spec.id == object_id:
                    spec.transform = qt
                    inst.transform = qt.to_rigid()
                    self.dirty.add(object_id)
                    return self._bump()
        raise KeyError(object_id)

    def set_light(self, payload: dict) -> int:
        payload = dict(payload)
        index = int(payload.pop("index", 0))
        with self.cond:
            lights = list(self.desc.lights)
            if index == len(lights):
                lights.append(payload)
            elif 0 <= index < len(lights):
                lights[index] = payload
            else:
                raise IndexError(index)
            old = self.desc.lights
            self.desc.lights = lights
            try:
                self.lights = self.desc.build_lights()
            except SceneValidationError:
                self.desc.lights = old
                raise
            # lights only affect the shadow step; depth caches stay valid
            return self._bump()

    def set_camera(self, payload: dict) -> int:
        with self.cond:
            old = self.desc.camera_spec
            self.desc.camera_spec = dict(payload)
            try:
                self.camera = self.desc.camera()
            except (KeyError, ValueError) as e:
                self.desc.camera_spec = old
                raise SceneValidationError(f"camera: {e}") from e
            self.full_dirty = True  # camera moves every primary ray
            return self._bump()

    def _bump(self) -> int:
        self.revision += 1
        self.cond.notify_all()
        return self.revision

    def scene_document(self) -> dict:
        with self.lock:
            return {"revision": self.revision,
                    "scene": json.loads(dumps_scene(self.desc))}

    # -- render worker --

    def worker_loop(self) -> None:
        while True:
            with self.cond:
                while not self.stop and self.revision == self.rendered_revision:
                    self.cond.wait()
                if self.stop:
                    return
                snap_revision = self.revision
                scene = list(self.instances)  # transforms are immutable values
                camera, lights, config = self.camera, self.lights, self.config
                changed = None if self.full_dirty else set(self.dirty)
                self.dirty.clear()
                self.full_dirty = False
                buffers = self.buffers
                if buffers is not None and (buffers.width != camera.width
                                            or buffers.height != camera.height):
                    buffers = None
                    changed = None
            try:
                result = compose_frame(scene, camera, lights, config,
                                       buffers=buffers, changed_ids=changed)
            except Exception:
                log.exception("render failed at revision %d", snap_revision)
                with self.cond:
                    self.rendered_revision = snap_revision
                    self.cond.notify_all()
                continue
            encoded = {}
            planes = {
                "color": result.image,
                "depth": result.buffers.depth.copy(),
                "id": result.buffers.id.copy(),
                "shadow": result.buffers.shadow.copy(),
            }
            with self.cond:
                self.buffers = result.buffers
                self.latest = {"revision": snap_revision, **planes}
                self.last_render_info = {
                    "revision": snap_revision,
                    "timing": result.timing,
                    "reused_cache": changed is not None,
                    "recomputed_ids": sorted(changed) if changed is not None
                    else [inst.id for inst in scene],
                }
                self.rendered_revision = snap_revision
                subscribers = list(self.subscribers)
                self.cond.notify_all()
            for sub in subscribers:
                key = sub.kind
                if key not in encoded:
                    encoded[key] = _frame_message(snap_revision, key, planes[key])
                sub.offer(encoded[key])

    def render_up_to_date(self, timeout: float = 60.0) -> dict:
        """Block until the latest revision is rendered; returns the planes."""
        with self.cond:
            target = self.revision
            self.cond.notify_all()
            if not self.cond.wait_for(lambda: self.rendered_revision >= target,
                                      timeout=timeout):
                raise TimeoutError("render did not finish in time")
            return dict(self.latest)


def encode_plane(kind: str, plane: np.ndarray) -> bytes:
    if kind == "color":
        return imgio.encode_color_png(plane)
    if kind == "depth":
        return imgio.encode_depth_png(plane)
    if kind == "id":
        return imgio.encode_id_png(plane)
    if kind == "shadow":
        return imgio.encode_gray_png(plane)
    raise ValueError(f"unknown buffer kind {kind!r}")


def _frame_message(revision: int, kind: str, plane: np.ndarray) -> bytes:
    payload = encode_plane(kind, plane)
    h, w = plane.shape[:2]
    header = struct.pack(HEADER_FMT, revision, BUFFER_KINDS[kind], ENCODING_PNG, 0, w, h)
    return header + payload


def create_app(desc: SceneDescription) -> FastAPI:
    session = Session(desc)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        worker = threading.Thread(target=session.worker_loop, name="render-worker",
                                  daemon=True)
        worker.start()
        yield
        with session.cond:
            session.stop = True
            session.cond.notify_all()
        worker.join(timeout=10)

    app = FastAPI(title="composition service", lifespan=lifespan)
    app.state.session = session

    @app.get("/api/scene")
    def get_scene():
        return session.scene_document()

    @app.get("/api/timing")
    def get_timing():
        with session.lock:
            return dict(session.last_render_info)

    @app.put("/api/object/{object_id}/transform")
    def put_transform(object_id: int, payload: dict = Body(...)):
        try:
            revision = session.set_transform(object_id, payload)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no object with id {object_id}")
        except SceneValidationError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"revision": revision}

    @app.put("/api/light")
    def put_light(payload: dict = Body(...)):
        try:
            revision = session.set_light(payload)
        except IndexError:
            raise HTTPException(status_code=404, detail="light index out of range")
        except (SceneValidationError, ValueError) as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"revision": revision}

    @app.put("/api/camera")
    def put_camera(payload: dict = Body(...)):
        try:
            revision = session.set_camera(payload)
        except SceneValidationError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"revision": revision}

    @app.post("/api/render")
    def pull_render(buffer: str = "color"):
        if buffer not in BUFFER_KINDS:
            raise HTTPException(status_code=422, detail=f"unknown buffer {buffer!r}")
        planes = session.render_up_to_date()
        data = _frame_message(planes["revision"], buffer, planes[buffer])
        return Response(content=data[struct.calcsize(HEADER_FMT):],
                        media_type="image/png",
                        headers={"X-Revision": str(planes["revision"])})

    @app.websocket("/api/stream")
    async def stream(ws: WebSocket, buffer: str = "color"):
        await ws.accept()
        if buffer not in BUFFER_KINDS:
            await ws.close(code=4400, reason=f"unknown buffer {buffer!r}")
            return
        sub = Subscriber(buffer)
        with session.lock:
            session.subscribers.append(sub)
            latest = session.latest
        if latest is not None:
            sub.offer(_frame_message(latest["revision"], buffer, latest[buffer]))

        def poll():
            # bounded wait so the websocket task can notice disconnects
            try:
                return sub.mailbox.get(timeout=0.5)
            except queue.Empty:
                return None

        try:
            while True:
                frame = await anyio.to_thread.run_sync(poll)
                if frame is not None:
                    await ws.send_bytes(frame)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            with session.lock:
                if sub in session.subscribers:
                    session.subscribers.remove(sub)

    return app
