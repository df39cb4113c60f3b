"""The three-step deferred render pipeline.

Step 1 walks every object's depth field over all pixel rays and keeps the
per-pixel minimum (depth buffer) and its owner (ID buffer). Step 2 shades
each covered pixel once, at the reconstructed surface point, falling back to
full ray integration for density outliers when enabled. Step 3 casts one
shadow ray per covered pixel against every object's depth field and darkens
occluded pixels. The final image is the color buffer times the shadow buffer.

Per-object depth planes are cached on the buffers so that editing one object
re-runs step 1 only for it; recombination is deterministic (scene order,
strict less-than), making cached and cold renders bit-identical.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fields
from .geometry import (
    Aabb,
    RigidTransform,
    clip_rays_to_aabb,
    transform_rays_to_local,
)
from .model import NedfModel, query_depth_world_batch

QUERY_CHUNK = 16384

_n_threads = 1


def set_thread_count(n: int) -> None:
    """Cap the worker threads used for per-object ray queries. Chunks write
    disjoint slices of pure-function results, so any count gives identical
    output."""
    global _n_threads
    _n_threads = max(1, int(n))


def thread_count_from_env(flag_value: int | None = None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("NEDF_THREADS")
    return int(env) if env else 1


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. orientation is camera-to-world; the camera looks along
    its local -z with +x right and +y up. Rays go through pixel centers."""

    position: np.ndarray
    orientation: np.ndarray
    fov_y: float
    width: int
    height: int
    t_near: float = 0.05
    t_far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        r = np.asarray(self.orientation, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-8):
            raise ValueError("camera orientation must be orthonormal")
        object.__setattr__(self, "orientation", r)
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError("vertical field of view must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not 0 < self.t_near < self.t_far:
            raise ValueError("need 0 < t_near < t_far")


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation looking from position toward target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    fn = np.linalg.norm(forward)
    if fn == 0:
        raise ValueError("camera target coincides with its position")
    forward = forward / fn
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("camera up vector is parallel to the view direction")
    right /= rn
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, -forward], axis=1)


def generate_primary_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """One unit ray per pixel center, row-major (row 0 is the top)."""
    w, h = camera.width, camera.height
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    tan_half = np.tan(camera.fov_y / 2.0)
    aspect = w / h
    gx, gy = np.meshgrid(xs * tan_half * aspect, ys * tan_half)
    dirs_cam = np.stack([gx.ravel(), gy.ravel(), -np.ones(w * h)], axis=1)
    dirs = dirs_cam @ camera.orientation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, (w * h, 3)).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# Scene instances and their depth queries
# ---------------------------------------------------------------------------

class NedfDepthBackend:
    """World-space depth via a trained depth-field model."""

    def __init__(self, model: NedfModel):
        self.model = model

    def query_world(self, g: RigidTransform, origins, dirs):
        return query_depth_world_batch(self.model, g, origins, dirs)


class OracleDepthBackend:
    """World-space depth via exact geometry (for fixtures and previews
    before a model is trained)."""

    def __init__(self, oracle: fields.DepthOracle):
        self.oracle = oracle

    def query_world(self, g: RigidTransform, origins, dirs):
        local_o, local_d = transform_rays_to_local(g, origins, dirs)
        depth, hit = self.oracle.trace(local_o, local_d)
        return g.scale * depth, hit


@dataclass
class SceneInstance:
    """One placed object: unique id, placement, a depth backend, and the
    appearance field used for shading and outlier resampling."""

    id: int
    transform: RigidTransform
    depth: NedfDepthBackend | OracleDepthBackend
    radiance: fields.DepthOracle

    @property
    def sampling_box(self) -> Aabb:
        """Local-space region that bounds the object's appearance."""
        return self.radiance.bounding_box


@dataclass(frozen=True)
class PointLight:
    position: np.ndarray
    beta: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        if not 0.0 < self.beta < 1.0:
            raise ValueError("shadow intensity beta must be in (0, 1)")


@dataclass(frozen=True)
class DirectionalLight:
    direction: np.ndarray  # direction the light travels (unit)
    beta: float = 0.4

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("light direction must be unit length")
        object.__setattr__(self, "direction", d)
        if not 0.0 < self.beta < 1.0:
            raise ValueError("shadow intensity beta must be in (0, 1)")


@dataclass
class RenderConfig:
    sigma_threshold: float | None = None  # None: per-field default
    resample: bool = False
    resample_samples: int = 128
    shadow_epsilon: float | None = None  # None: derived from scene quantization
    shadows: bool = True
    clear_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma_threshold is not None and self.sigma_threshold < 0:
            raise ValueError("sigma threshold must be >= 0")
        if self.shadow_epsilon is not None and self.shadow_epsilon <= 0:
            raise ValueError("shadow epsilon must be positive")


def default_sigma_threshold(radiance: fields.DepthOracle) -> float:
    if isinstance(radiance, fields.VoxelOracle):
        return 1.0
    return fields.SIGMA_SURFACE / 2.0


def default_shadow_epsilon(scene: list[SceneInstance]) -> float:
    """Twice the worst depth-quantization step across the scene's models."""
    eps = 1e-4
    for inst in scene:
        if isinstance(inst.depth, NedfDepthBackend):
            eps = max(eps, 2.0 * inst.transform.scale * inst.depth.model.fine_width)
    return eps


@dataclass
class FrameBuffers:
    """Per-pixel planes, all (H, W): depth (+inf = miss), object id (-1 =
    none), color, shadow factor, and the per-object depth cache keyed by id."""

    width: int
    height: int
    depth: np.ndarray = field(init=False)
    id: np.ndarray = field(init=False)
    rgb: np.ndarray = field(init=False)
    shadow: np.ndarray = field(init=False)
    per_object_depth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.depth = np.full((self.height, self.width), np.inf)
        self.id = np.full((self.height, self.width), -1, dtype=np.int32)
        self.rgb = np.zeros((self.height, self.width, 3))
        self.shadow = np.ones((self.height, self.width))

    def clear_hit_planes(self):
        self.depth.fill(np.inf)
        self.id.fill(-1)


def _query_instance_chunked(inst: SceneInstance, origins: np.ndarray,
                            dirs: np.ndarray) -> np.ndarray:
    """Alpha-folded depth per ray: +inf where the object reports no hit or a
    non-finite/non-positive depth."""
    n = origins.shape[0]
    plane = np.full(n, np.inf)
    slices = [slice(s, min(s + QUERY_CHUNK, n)) for s in range(0, n, QUERY_CHUNK)]

    def fill(sl):
        depth, alpha = inst.depth.query_world(inst.transform, origins[sl], dirs[sl])
        ok = alpha & np.isfinite(depth) & (depth > 0)
        chunk = np.full(sl.stop - sl.start, np.inf)
        chunk[ok] = depth[ok]
        plane[sl] = chunk

    if _n_threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=_n_threads) as pool:
            list(pool.map(fill, slices))
    else:
        for sl in slices:
            fill(sl)
    return plane


def _recombine(scene: list[SceneInstance], buffers: FrameBuffers) -> None:
    """Fold cached per-object planes into depth/id. Scene order with strict
    less-than, so ties go to the earliest object and the result is a pure
    function of the planes."""
    buffers.clear_hit_planes()
    for inst in scene:
        plane = buffers.per_object_depth[inst.id]
        closer = plane < buffers.depth
        buffers.depth[closer] = plane[closer]
        buffers.id[closer] = inst.id


def nedf_generation_step(scene: list[SceneInstance], camera: Camera,
                         buffers: FrameBuffers) -> None:
    """Step 1: fill depth and id buffers from every object's depth field."""
    origins, dirs = generate_primary_rays(camera)
    for inst in scene:
        plane = _query_instance_chunked(inst, origins, dirs)
        buffers.per_object_depth[inst.id] = plane.reshape(camera.height, camera.width)
    _recombine(scene, buffers)


def reuse_buffers(scene: list[SceneInstance], camera: Camera, buffers: FrameBuffers,
                  changed_ids) -> dict:
    """Step 1 variant that recomputes only the planes of changed objects.

    Falls back to a full recompute when an unchanged object has no cached
    plane. The recombined result is bit-identical to nedf_generation_step.
    """
    changed = set(changed_ids)
    missing = [inst.id for inst in scene
               if inst.id not in changed and inst.id not in buffers.per_object_depth]
    if missing:
        nedf_generation_step(scene, camera, buffers)
        return {"recomputed": [inst.id for inst in scene], "fallback": True}
    origins, dirs = generate_primary_rays(camera)
    recomputed = []
    for inst in scene:
        if inst.id in changed:
            plane = _query_instance_chunked(inst, origins, dirs)
            buffers.per_object_depth[inst.id] = plane.reshape(camera.height, camera.width)
            recomputed.append(inst.id)
    stale = set(buffers.per_object_depth) - {inst.id for inst in scene}
    for sid in stale:
        del buffers.per_object_depth[sid]
    _recombine(scene, buffers)
    return {"recomputed": recomputed, "fallback": False}


def resample_bounds(inst: SceneInstance, local_o: np.ndarray,
                    local_d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integration range for outlier pixels: the local-ray clip of the
    object's appearance bounds."""
    return clip_rays_to_aabb(local_o, local_d, inst.sampling_box)


def deferred_shading_step(scene: list[SceneInstance], camera: Camera,
                          buffers: FrameBuffers, config: RenderConfig) -> dict:
    """Step 2: shade each covered pixel with a single field evaluation at the
    reconstructed surface point. Pixels whose density falls below the
    threshold are outliers: resample them with the full render integral when
    enabled, otherwise keep the single-sample color. Returns counts."""
    origins, dirs = generate_primary_rays(camera)
    flat_id = buffers.id.ravel()
    flat_depth = buffers.depth.ravel()
    rgb = buffers.rgb.reshape(-1, 3)
    rgb[flat_id < 0] = np.asarray(config.clear_color, dtype=np.float64)
    n_resampled = 0
    for inst in scene:
        mask = flat_id == inst.id
        if not mask.any():
            continue
        o, d = origins[mask], dirs[mask]
        x = o + flat_depth[mask, None] * d
        g = inst.transform
        local_pts = g.invert_points(x)
        local_dirs = d @ g.rotation
        color, sigma = inst.radiance.radiance(local_pts, local_dirs)
        threshold = (config.sigma_threshold if config.sigma_threshold is not None
                     else default_sigma_threshold(inst.radiance))
        outlier = sigma < threshold
        if config.resample and outlier.any():
            local_o = g.invert_points(o[outlier])
            ld = local_dirs[outlier]
            t0, t1, crosses = resample_bounds(inst, local_o, ld)
            if crosses.any():
                vr_color, _ = inst.radiance.volume_color(
                    local_o[crosses], ld[crosses], t0[crosses], t1[crosses],
                    config.resample_samples)
                sub = np.flatnonzero(outlier)[crosses]
                color[sub] = vr_color
            n_resampled += int(outlier.sum())
        rgb[mask] = color
    return {"resampled": n_resampled, "covered": int((flat_id >= 0).sum())}


def _min_scene_depth(scene: list[SceneInstance], origins: np.ndarray,
                     dirs: np.ndarray, include_zero: bool = False) -> np.ndarray:
    """Minimum alpha-folded depth over all objects. include_zero accepts
    depth-0 hits (rays starting on or inside a surface)."""
    depth = np.full(origins.shape[0], np.inf)
    for inst in scene:
        if include_zero:
            d, alpha = inst.depth.query_world(inst.transform, origins, dirs)
            ok = alpha & np.isfinite(d) & (d >= 0)
            plane = np.where(ok, d, np.inf)
        else:
            plane = _query_instance_chunked(inst, origins, dirs)
        depth = np.minimum(depth, plane)
    return depth


def shadow_step(scene: list[SceneInstance], camera: Camera, buffers: FrameBuffers,
                light, config: RenderConfig) -> None:
    """Step 3: one shadow ray per covered pixel; darken by the light's beta
    when some surface sits strictly closer to the light than the pixel's
    surface point (epsilon-biased against self-shadowing)."""
    valid = (buffers.id >= 0) & np.isfinite(buffers.depth)
    if not valid.any():
        return
    origins, dirs = generate_primary_rays(camera)
    flat_valid = valid.ravel()
    x = origins[flat_valid] + buffers.depth.ravel()[flat_valid, None] * dirs[flat_valid]
    eps = (config.shadow_epsilon if config.shadow_epsilon is not None
           else default_shadow_epsilon(scene))
    if isinstance(light, PointLight):
        to_x = x - light.position[None, :]
        dist = np.linalg.norm(to_x, axis=1)
        ray_d = to_x / np.maximum(dist, 1e-300)[:, None]
        ray_o = np.broadcast_to(light.position, x.shape).copy()
        d_shadow = _min_scene_depth(scene, ray_o, ray_d)
        shadowed = d_shadow + eps < dist
    elif isinstance(light, DirectionalLight):
        # parallel light: march from just above the surface toward the light;
        # the epsilon offset clears the receiver's own surface, and any
        # remaining hit (even depth 0: the ray starts inside a body) occludes
        ray_d = np.broadcast_to(-light.direction, x.shape).copy()
        d_shadow = _min_scene_depth(scene, x + eps * ray_d, ray_d, include_zero=True)
        shadowed = np.isfinite(d_shadow)
    else:
        raise TypeError(f"unsupported light type {type(light).__name__}")
    factors = np.where(shadowed, light.beta, 1.0)
    flat_shadow = buffers.shadow.ravel()
    flat_shadow[flat_valid] *= factors
    buffers.shadow = flat_shadow.reshape(buffers.shadow.shape)


def import_external_gbuffer(buffers: FrameBuffers, depth_plane: np.ndarray,
                            color_image: np.ndarray, pseudo_id: int) -> None:
    """Depth-composite an externally rendered layer: wherever it is strictly
    closer it takes over depth, id and color, and from then on participates
    in shadowing as a receiver."""
    if depth_plane.shape != buffers.depth.shape:
        raise ValueError("external depth size does not match the frame")
    if color_image.shape != buffers.rgb.shape:
        raise ValueError("external color size does not match the frame")
    if pseudo_id < 0:
        raise ValueError("pseudo id must be non-negative")
    closer = depth_plane < buffers.depth
    buffers.depth[closer] = depth_plane[closer]
    buffers.id[closer] = pseudo_id
    buffers.rgb[closer] = color_image[closer]


@dataclass
class RenderResult:
    image: np.ndarray
    buffers: FrameBuffers
    timing: dict


def compose_frame(scene: list[SceneInstance], camera: Camera, lights,
                  config: RenderConfig | None = None,
                  buffers: FrameBuffers | None = None,
                  changed_ids=None,
                  external: tuple[np.ndarray, np.ndarray, int] | None = None) -> RenderResult:
    """Run steps 1-3 and multiply color by shadow.

    Pass previous buffers plus changed_ids to reuse cached depth planes.
    `external` is an optional (depth, color, pseudo_id) layer composited
    between steps 1 and 2.
    """
    config = config or RenderConfig()
    if buffers is None:
        buffers = FrameBuffers(camera.width, camera.height)
    timing = {}
    t0 = time.perf_counter()
    if changed_ids is None:
        nedf_generation_step(scene, camera, buffers)
    else:
        reuse_buffers(scene, camera, buffers, changed_ids)
    timing["step1_depth_id"] = time.perf_counter() - t0

    if external is not None:
        import_external_gbuffer(buffers, external[0], external[1], external[2])

    t0 = time.perf_counter()
    stats = deferred_shading_step(scene, camera, buffers, config)
    timing["step2_shading"] = time.perf_counter() - t0
    timing["resample_ratio"] = stats["resampled"] / (camera.width * camera.height)

    t0 = time.perf_counter()
    buffers.shadow.fill(1.0)
    if config.shadows:
        for light in lights:
            shadow_step(scene, camera, buffers, light, config)
    timing["step3_shadow"] = time.perf_counter() - t0

    image = buffers.rgb * buffers.shadow[:, :, None]
    return RenderResult(image=image, buffers=buffers, timing=timing)


def step_timing_report(scene: list[SceneInstance], camera: Camera, lights,
                       config: RenderConfig | None = None,
                       repetitions: int = 1) -> dict:
    """Wall-clock per step over repeated cold renders, as a JSON-ready dict."""
    samples = {"step1_depth_id": [], "step2_shading": [], "step3_shadow": []}
    ratio = 0.0
    for _ in range(max(1, repetitions)):
        result = compose_frame(scene, camera, lights, config)
        for k in samples:
            samples[k].append(result.timing[k])
        ratio = result.timing["resample_ratio"]
    total = sum(float(np.mean(v)) for v in samples.values())
    report = {
        "width": camera.width,
        "height": camera.height,
        "objects": len(scene),
        "repetitions": int(max(1, repetitions)),
        "resample_ratio": ratio,
        "total_seconds": total,
        "steps": {},
    }
    for k, v in samples.items():
        mean = float(np.mean(v))
        report["steps"][k] = {
            "mean_seconds": mean,
            "stddev_seconds": float(np.std(v)),
            "share": mean / total if total > 0 else 0.0,
        }
    return report
