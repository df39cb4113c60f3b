"""Declarative scene files: objects with placements, lights, camera, and
keyframe animation tracks.

Scenes are JSON with a versioned schema. Rotations are stored as unit
quaternions [w, x, y, z]; matrices are derived at load. Loading validates
every invariant and reports the offending field path; serialization is
canonical, so load -> dump -> load is a fixed point.

Depth-model files referenced by several objects are loaded once and shared:
per-instance state is the transform and id only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fields
from .errors import SceneValidationError
from .geometry import Aabb, RigidTransform, vec3
from .model import NedfModel, load_nedf
from .pipeline import (
    Camera,
    DirectionalLight,
    NedfDepthBackend,
    OracleDepthBackend,
    PointLight,
    RenderConfig,
    SceneInstance,
    look_at,
)

SCENE_VERSION = 1


# ---------------------------------------------------------------------------
# Quaternions ([w, x, y, z], unit)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    q = q / n
    return -q if q[0] < 0 else q  # canonical sign


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return quat_normalize(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    dot = float(qa @ qb)
    if dot < 0:
        qb, dot = -qb, -dot
    if dot > 0.9995:  # nearly parallel: lerp and renormalize
        return quat_normalize(qa + u * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return quat_normalize((np.sin((1 - u) * theta) * qa + np.sin(u * theta) * qb)
                          / np.sin(theta))


@dataclass(frozen=True)
class QuatTransform:
    """File-level placement: quaternion rotation, translation, uniform scale."""

    translation: np.ndarray
    rotation_quat: np.ndarray
    scale: float = 1.0

    def to_rigid(self) -> RigidTransform:
        return RigidTransform(quat_to_matrix(self.rotation_quat),
                              self.translation, self.scale)

    @staticmethod
    def from_rigid(g: RigidTransform) -> "QuatTransform":
        return QuatTransform(translation=g.translation.copy(),
                             rotation_quat=matrix_to_quat(g.rotation),
                             scale=g.scale)

    def to_json(self) -> dict:
        return {"translation": [float(v) for v in self.translation],
                "rotation_quat": [float(v) for v in self.rotation_quat],
                "scale": float(self.scale)}


@dataclass(frozen=True)
class AnimationTrack:
    """Keyframed placement: linear translation, slerp rotation, log-linear
    scale, clamped outside the keyframe range."""

    keyframes: tuple  # ((time, QuatTransform), ...) strictly increasing times

    def __post_init__(self):
        if len(self.keyframes) < 1:
            raise ValueError("animation needs at least one keyframe")
        times = [t for t, _ in self.keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")


def evaluate_animation(track: AnimationTrack, t: float) -> RigidTransform:
    keys = track.keyframes
    if t <= keys[0][0]:
        return keys[0][1].to_rigid()
    if t >= keys[-1][0]:
        return keys[-1][1].to_rigid()
    hi = next(i for i, (kt, _) in enumerate(keys) if kt > t)
    (t0, a), (t1, b) = keys[hi - 1], keys[hi]
    u = (t - t0) / (t1 - t0)
    translation = (1 - u) * a.translation + u * b.translation
    quat = quat_slerp(a.rotation_quat, b.rotation_quat, u)
    scale = float(np.exp((1 - u) * np.log(a.scale) + u * np.log(b.scale)))
    rot = quat_to_matrix(quat)
    # re-orthonormalize against accumulated float drift
    u_svd, _, vt = np.linalg.svd(rot)
    rot = u_svd @ vt
    return RigidTransform(rot, translation, scale)


# ---------------------------------------------------------------------------
# Geometry specs
# ---------------------------------------------------------------------------

def parse_primitive(node: dict, where: str, base_dir: Path):
    if not isinstance(node, dict) or "type" not in node:
        raise SceneValidationError(f"{where}: geometry node must have a 'type'")
    kind = node["type"]
    try:
        if kind == "sphere":
            return fields.Sphere(np.asarray(node.get("center", [0, 0, 0]), dtype=np.float64),
                                 float(node["radius"]))
        if kind == "box":
            return fields.BoxPrim(np.asarray(node.get("center", [0, 0, 0]), dtype=np.float64),
                                  np.asarray(node["half_extents"], dtype=np.float64))
        if kind == "torus":
            return fields.Torus(np.asarray(node.get("center", [0, 0, 0]), dtype=np.float64),
                                float(node["major_r"]), float(node["minor_r"]))
        if kind == "plane":
            return fields.Plane(np.asarray(node["normal"], dtype=np.float64),
                                float(node.get("offset", 0.0)))
        if kind == "union":
            return fields.Union(tuple(
                parse_primitive(c, f"{where}.children[{i}]", base_dir)
                for i, c in enumerate(node["children"])))
        if kind == "transformed":
            g = parse_transform(node["transform"], f"{where}.transform").to_rigid()
            return fields.Transformed(
                parse_primitive(node["child"], f"{where}.child", base_dir), g)
    except SceneValidationError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SceneValidationError(f"{where}: {e}") from e
    raise SceneValidationError(f"{where}: unknown geometry type {kind!r}")


def build_oracle(node: dict, where: str, base_dir: Path) -> fields.DepthOracle:
    if isinstance(node, dict) and node.get("type") == "voxel":
        path = base_dir / node["path"]
        if not path.exists():
            raise SceneValidationError(f"{where}.path: voxel file not found: {path}")
        return fields.VoxelOracle(fields.load_voxel_field(path))
    return fields.AnalyticOracle(parse_primitive(node, where, base_dir))


def parse_transform(node: dict, where: str) -> QuatTransform:
    try:
        q = np.asarray(node.get("rotation_quat", [1, 0, 0, 0]), dtype=np.float64)
        if q.shape != (4,):
            raise SceneValidationError(f"{where}.rotation_quat: expected 4 components")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise SceneValidationError(f"{where}.rotation_quat: not unit length")
        t = np.asarray(node.get("translation", [0, 0, 0]), dtype=np.float64)
        if t.shape != (3,):
            raise SceneValidationError(f"{where}.translation: expected 3 components")
        s = float(node.get("scale", 1.0))
        if not s > 0:
            raise SceneValidationError(f"{where}.scale: must be positive")
        return QuatTransform(translation=t, rotation_quat=quat_normalize(q), scale=s)
    except SceneValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise SceneValidationError(f"{where}: {e}") from e


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass
class ObjectSpec:
    id: int
    geometry: dict
    transform: QuatTransform
    nedf_model: str | None = None
    animation: AnimationTrack | None = None


@dataclass
class SceneDescription:
    camera_spec: dict
    objects: list
    lights: list
    clear_color: tuple = (0.0, 0.0, 0.0)
    render_overrides: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    _model_cache: dict = field(default_factory=dict, repr=False)

    def camera(self) -> Camera:
        c = self.camera_spec
        return Camera(
            position=np.asarray(c["position"], dtype=np.float64),
            orientation=look_at(c["position"], c["look_at"], c.get("up", (0, 1, 0))),
            fov_y=np.deg2rad(float(c.get("fov_deg", 45.0))),
            width=int(c.get("width", 128)),
            height=int(c.get("height", 128)),
            t_near=float(c.get("near", 0.05)),
            t_far=float(c.get("far", 100.0)),
        )

    def render_config(self) -> RenderConfig:
        return RenderConfig(clear_color=tuple(self.clear_color), **self.render_overrides)

    def shared_model(self, rel_path: str) -> NedfModel:
        key = str((self.base_dir / rel_path).resolve())
        if key not in self._model_cache:
            self._model_cache[key] = load_nedf(key)
        return self._model_cache[key]

    def instantiate(self, time: float | None = None) -> list[SceneInstance]:
        """Build renderable instances; animated objects are posed at `time`
        (their base transform when None)."""
        out = []
        for spec in self.objects:
            oracle = build_oracle(spec.geometry, f"objects[{spec.id}].geometry",
                                  self.base_dir)
            if spec.nedf_model:
                backend = NedfDepthBackend(self.shared_model(spec.nedf_model))
            else:
                backend = OracleDepthBackend(oracle)
            g = spec.transform.to_rigid()
            if spec.animation is not None and time is not None:
                g = evaluate_animation(spec.animation, time)
            out.append(SceneInstance(id=spec.id, transform=g,
                                     depth=backend, radiance=oracle))
        return out

    def build_lights(self):
        out = []
        for i, node in enumerate(self.lights):
            kind = node.get("type", "point")
            beta = float(node.get("beta", 0.4))
            if kind == "point":
                out.append(PointLight(position=np.asarray(node["position"], dtype=np.float64),
                                      beta=beta))
            elif kind == "directional":
                d = np.asarray(node["direction"], dtype=np.float64)
                n = np.linalg.norm(d)
                if n == 0:
                    raise SceneValidationError(f"lights[{i}].direction: zero vector")
                out.append(DirectionalLight(direction=d / n, beta=beta))
            else:
                raise SceneValidationError(f"lights[{i}].type: unknown light {kind!r}")
        return out


def _parse_animation(node: dict, where: str) -> AnimationTrack:
    frames = node.get("keyframes")
    if not frames:
        raise SceneValidationError(f"{where}.keyframes: need at least one keyframe")
    keys = []
    for i, kf in enumerate(frames):
        if "time" not in kf:
            raise SceneValidationError(f"{where}.keyframes[{i}].time: missing")
        keys.append((float(kf["time"]),
                     parse_transform(kf.get("transform", {}),
                                     f"{where}.keyframes[{i}].transform")))
    try:
        return AnimationTrack(keyframes=tuple(keys))
    except ValueError as e:
        raise SceneValidationError(f"{where}: {e}") from e


def loads_scene(text: str, base_dir: Path = Path(".")) -> SceneDescription:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneValidationError(f"scene file is not valid JSON: {e}") from e
    if doc.get("version") != SCENE_VERSION:
        raise SceneValidationError(f"version: expected {SCENE_VERSION}, got {doc.get('version')!r}")
    if "camera" not in doc or "position" not in doc["camera"] or "look_at" not in doc["camera"]:
        raise SceneValidationError("camera: position and look_at are required")

    objects = []
    seen_ids: dict[int, int] = {}
    for i, node in enumerate(doc.get("objects", [])):
        if "id" not in node:
            raise SceneValidationError(f"objects[{i}].id: missing")
        oid = int(node["id"])
        if oid < 0:
            raise SceneValidationError(f"objects[{i}].id: must be non-negative")
        if oid in seen_ids:
            raise SceneValidationError(
                f"objects[{i}].id: duplicate id {oid} (also objects[{seen_ids[oid]}])")
        seen_ids[oid] = i
        if "geometry" not in node:
            raise SceneValidationError(f"objects[{i}].geometry: missing")
        model_path = node.get("nedf_model")
        if model_path is not None and not (base_dir / model_path).exists():
            raise SceneValidationError(
                f"objects[{i}].nedf_model: file not found: {base_dir / model_path}")
        spec = ObjectSpec(
            id=oid,
            geometry=node["geometry"],
            transform=parse_transform(node.get("transform", {}), f"objects[{i}].transform"),
            nedf_model=model_path,
            animation=(_parse_animation(node["animation"], f"objects[{i}].animation")
                       if "animation" in node else None),
        )
        # validate geometry eagerly so errors carry the field path
        build_oracle(spec.geometry, f"objects[{i}].geometry", base_dir)
        objects.append(spec)

    desc = SceneDescription(
        camera_spec=dict(doc["camera"]),
        objects=objects,
        lights=list(doc.get("lights", [])),
        clear_color=tuple(doc.get("clear_color", (0.0, 0.0, 0.0))),
        render_overrides=dict(doc.get("render", {})),
        base_dir=base_dir,
    )
    desc.build_lights()  # validate
    desc.camera()
    desc.render_config()
    return desc


def load_scene(path) -> SceneDescription:
    path = Path(path)
    return loads_scene(path.read_text(), base_dir=path.parent)


def dumps_scene(desc: SceneDescription) -> str:
    """Canonical serialization: fixed field order, plain floats."""
    doc = {
        "version": SCENE_VERSION,
        "camera": desc.camera_spec,
        "clear_color": [float(v) for v in desc.clear_color],
        "render": desc.render_overrides,
        "lights": desc.lights,
        "objects": [],
    }
    for spec in desc.objects:
        node = {"id": spec.id, "geometry": spec.geometry,
                "transform": spec.transform.to_json()}
        if spec.nedf_model is not None:
            node["nedf_model"] = spec.nedf_model
        if spec.animation is not None:
            node["animation"] = {"keyframes": [
                {"time": t, "transform": q.to_json()} for t, q in spec.animation.keyframes]}
        doc["objects"].append(node)
    return json.dumps(doc, indent=2) + "\n"


def save_scene(desc: SceneDescription, path) -> None:
    Path(path).write_text(dumps_scene(desc))
