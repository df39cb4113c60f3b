import io
import json
import struct
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from nedf.scene import loads_scene
from nedf.service import HEADER_FMT, create_app

SCENE = {
    "version": 1,
    "camera": {"position": [0, 1, -5], "look_at": [0, 0, 0],
               "fov_deg": 45, "width": 24, "height": 24},
    "clear_color": [0, 0, 0],
    "lights": [{"type": "point", "position": [3, 4, -3], "beta": 0.4}],
    "objects": [
        {"id": 0, "geometry": {"type": "sphere", "radius": 1.0},
         "transform": {"translation": [0, 0, 0]}},
        {"id": 1, "geometry": {"type": "sphere", "radius": 0.7},
         "transform": {"translation": [1.5, 0, 1.0]}},
        {"id": 2, "geometry": {"type": "sphere", "radius": 0.5},
         "transform": {"translation": [-1.5, 0, 0.5]}},
    ],
}


@pytest.fixture
def client():
    app = create_app(loads_scene(json.dumps(SCENE)))
    with TestClient(app) as c:
        yield c


def parse_frame(data):
    header = struct.unpack(HEADER_FMT, data[:16])
    image = Image.open(io.BytesIO(data[16:]))
    return {"revision": header[0], "kind": header[1], "encoding": header[2],
            "w": header[4], "h": header[5], "image": image}


def wait_for_revision(client, revision, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        info = client.get("/api/timing").json()
        if info.get("revision", -1) >= revision:
            return info
        time.sleep(0.02)
    raise TimeoutError(f"revision {revision} never rendered")


class TestSceneEndpoint:
    def test_fresh_session_returns_scene_verbatim(self, client):
        doc = client.get("/api/scene").json()
        assert doc["revision"] == 0
        ids = [o["id"] for o in doc["scene"]["objects"]]
        assert ids == [0, 1, 2]
        assert doc["scene"]["camera"]["position"] == [0, 1, -5]

    def test_revision_increments_per_edit(self, client):
        r1 = client.put("/api/object/1/transform",
                        json={"translation": [1.5, 0.2, 1.0]}).json()["revision"]
        r2 = client.put("/api/object/1/transform",
                        json={"translation": [1.5, 0.2, 1.0]}).json()["revision"]
        assert (r1, r2) == (1, 2)  # identity re-apply still bumps

    def test_edit_reflected_in_scene_document(self, client):
        client.put("/api/object/2/transform", json={"translation": [0, 1, 0],
                                                    "scale": 2.0})
        doc = client.get("/api/scene").json()
        obj = next(o for o in doc["scene"]["objects"] if o["id"] == 2)
        assert obj["transform"]["translation"] == [0, 1, 0]
        assert obj["transform"]["scale"] == 2.0


class TestTransformEndpoint:
    def test_unknown_object_404(self, client):
        assert client.put("/api/object/99/transform",
                          json={"translation": [0, 0, 0]}).status_code == 404

    def test_invalid_quaternion_rejected(self, client):
        resp = client.put("/api/object/0/transform",
                          json={"rotation_quat": [2, 0, 0, 0]})
        assert resp.status_code == 422
        assert "rotation_quat" in resp.json()["detail"]

    def test_nonpositive_scale_rejected(self, client):
        assert client.put("/api/object/0/transform",
                          json={"scale": 0.0}).status_code == 422

    def test_moving_one_object_recomputes_one_plane(self, client):
        wait_for_revision(client, 0)
        r = client.put("/api/object/1/transform",
                       json={"translation": [1.0, 0.3, 1.0]}).json()["revision"]
        info = wait_for_revision(client, r)
        assert info["reused_cache"] is True
        assert info["recomputed_ids"] == [1]


class TestLightAndCamera:
    def test_light_edit_keeps_depth_caches(self, client):
        wait_for_revision(client, 0)
        r = client.put("/api/light",
                       json={"type": "point", "position": [0, 6, 0], "beta": 0.5}
                       ).json()["revision"]
        info = wait_for_revision(client, r)
        assert info["reused_cache"] is True
        assert info["recomputed_ids"] == []

    def test_camera_edit_recomputes_everything(self, client):
        wait_for_revision(client, 0)
        payload = dict(SCENE["camera"], position=[0, 2, -6])
        r = client.put("/api/camera", json=payload).json()["revision"]
        info = wait_for_revision(client, r)
        assert info["reused_cache"] is False
        assert info["recomputed_ids"] == [0, 1, 2]

    def test_invalid_fov_rejected(self, client):
        payload = dict(SCENE["camera"], fov_deg=0.0)
        assert client.put("/api/camera", json=payload).status_code == 422

    def test_invalid_light_rejected(self, client):
        assert client.put("/api/light",
                          json={"type": "point", "position": [0, 6, 0],
                                "beta": 1.5}).status_code == 422


class TestPullRender:
    def test_returns_png_with_revision(self, client):
        resp = client.post("/api/render?buffer=color")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(resp.content))
        assert img.size == (24, 24)
        assert "X-Revision" in resp.headers

    def test_unknown_buffer_rejected(self, client):
        assert client.post("/api/render?buffer=normals").status_code == 422

    def test_reused_render_matches_cold_session(self, client):
        move = {"translation": [0.8, 0.1, 1.0]}
        client.put("/api/object/1/transform", json=move)
        warm = client.post("/api/render?buffer=color").content
        cold_doc = json.loads(json.dumps(SCENE))
        cold_doc["objects"][1]["transform"] = move
        cold_app = create_app(loads_scene(json.dumps(cold_doc)))
        with TestClient(cold_app) as cold_client:
            cold = cold_client.post("/api/render?buffer=color").content
        assert warm == cold


class TestStream:
    def test_subscribe_then_edit_yields_matching_revision(self, client):
        with client.websocket_connect("/api/stream?buffer=color") as ws:
            first = parse_frame(ws.receive_bytes())  # current frame on subscribe
            assert first["w"] == 24 and first["h"] == 24
            r = client.put("/api/object/0/transform",
                           json={"translation": [0, 0.4, 0]}).json()["revision"]
            frame = parse_frame(ws.receive_bytes())
            assert frame["revision"] == r
            assert frame["kind"] == 0 and frame["encoding"] == 0

    def test_depth_stream_is_grayscale(self, client):
        with client.websocket_connect("/api/stream?buffer=depth") as ws:
            frame = parse_frame(ws.receive_bytes())
            assert frame["kind"] == 1
            assert frame["image"].mode == "L"

    def test_id_stream_is_16bit(self, client):
        with client.websocket_connect("/api/stream?buffer=id") as ws:
            frame = parse_frame(ws.receive_bytes())
            assert frame["kind"] == 2
            vals = np.asarray(frame["image"])
            assert set(np.unique(vals)) <= {0, 1, 2, 3}

    def test_rapid_edits_coalesce_to_final_state(self, client):
        wait_for_revision(client, 0)
        last = None
        for i in range(12):
            last = client.put("/api/object/0/transform",
                              json={"translation": [0, 0.05 * i, 0]}).json()["revision"]
        wait_for_revision(client, last)
        with client.websocket_connect("/api/stream?buffer=color") as ws:
            frame = parse_frame(ws.receive_bytes())
            assert frame["revision"] == last
        # final state is the last edit, not an intermediate
        doc = client.get("/api/scene").json()
        obj = next(o for o in doc["scene"]["objects"] if o["id"] == 0)
        assert obj["transform"]["translation"] == [0, 0.55, 0]
