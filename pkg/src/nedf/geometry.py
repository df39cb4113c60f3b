"""Ray and rigid-transform math for depth-field rendering.

Everything here is pure: functions take immutable inputs (numpy arrays are
treated as read-only) and return new values, so any of it can run from any
number of threads.

Vectors are float64 numpy arrays of shape (3,); batched variants take (N, 3)
arrays and are the fast path used by training and the render pipeline. The
single-ray dataclass API is the reference surface the batched code must agree
with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Number of sample points used to describe a ray to the intersection network,
# and the sinusoidal-encoding depth. 16 points x (3 + 2*10*3) = 1008 features.
N_RAY_POINTS = 16
ENCODING_LEVELS = 10
FEATURES_PER_POINT = 3 * (1 + 2 * ENCODING_LEVELS)
ENCODED_DIM = N_RAY_POINTS * FEATURES_PER_POINT

_UNIT_TOL = 1e-9


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Ray:
    """A ray with unit-length direction.

    Use `Ray.through(origin, target)` or `Ray.unit(origin, direction)` when the
    direction is not already normalized.
    """

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("ray origin/direction must be 3-vectors")
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("ray components must be finite")
        if abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @staticmethod
    def unit(origin, direction) -> "Ray":
        return Ray(np.asarray(origin, dtype=np.float64),
                   normalize(np.asarray(direction, dtype=np.float64)))

    @staticmethod
    def through(origin, target) -> "Ray":
        origin = np.asarray(origin, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        return Ray.unit(origin, target - origin)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class RigidTransform:
    """World placement of an object: v_world = scale * R @ q_local + T.

    Scale is a single positive scalar (uniform); non-uniform scale is rejected.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if abs(float(np.linalg.det(r)) - 1.0) > 1e-8:
            raise ValueError("rotation must have determinant +1")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be a positive real")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3), 1.0)

    def apply_point(self, p: np.ndarray) -> np.ndarray:
        return self.scale * (self.rotation @ p) + self.translation

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (pts @ self.rotation.T) + self.translation

    def invert_point(self, p: np.ndarray) -> np.ndarray:
        return (self.rotation.T @ (p - self.translation)) / self.scale

    def invert_points(self, pts: np.ndarray) -> np.ndarray:
        return ((pts - self.translation) @ self.rotation) / self.scale

    def invert_direction(self, d: np.ndarray) -> np.ndarray:
        return self.rotation.T @ d

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `inner` first, then self."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.scale * (self.rotation @ inner.translation) + self.translation,
            self.scale * inner.scale,
        )


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError("box min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (self.max - self.min)

    @property
    def half_diagonal(self) -> float:
        return float(np.linalg.norm(self.half_extents))

    def contains(self, p: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(p >= self.min - tol) and np.all(p <= self.max + tol))


@dataclass(frozen=True)
class TangencyFrame:
    """Closest ray point to the origin, and the origin-side distance to it.

    p_perp is the foot of the perpendicular from the coordinate origin onto
    the ray; the ray is tangent there to the origin-centered sphere through
    p_perp. dist_o_pperp = |origin - p_perp| >= 0.
    """

    p_perp: np.ndarray
    dist_o_pperp: float


@dataclass(frozen=True)
class RaySampleTuple:
    """16 normalized sample points describing a ray inside a box.

    Points are in [-1, 1]^3 coordinates of the box (center at 0, half extents
    mapped to 1). hit_box is False when the ray misses the box, in which case
    there are no points.
    """

    points: np.ndarray | None
    hit_box: bool


def tangency_frame(ray: Ray) -> TangencyFrame:
    """Foot of the perpendicular from the origin to the ray.

    p_perp = o - (o.d) d is the unique ray point closest to the origin;
    the signed offset of any other ray point from p_perp is measured along d.
    """
    o, d = ray.origin, ray.direction
    t = -float(o @ d)
    p_perp = o + t * d
    return TangencyFrame(p_perp=p_perp, dist_o_pperp=float(np.linalg.norm(o - p_perp)))


def tangency_dist_batch(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """|o - p_perp| for a batch of rays: equals |o . d| for unit directions."""
    return np.abs(np.einsum("ij,ij->i", origins, dirs))


def depth_from_mu(frame: TangencyFrame, mu: float) -> float:
    """Depth along the ray from its origin, given the tangency offset mu.

    mu is positive when the surface lies between the origin and p_perp.
    Negative results are possible here; callers filter them.
    """
    return frame.dist_o_pperp - mu


def mu_from_depth(frame: TangencyFrame, depth: float) -> float:
    """Exact inverse of depth_from_mu."""
    return frame.dist_o_pperp - depth


def transform_ray_to_local(g: RigidTransform, ray: Ray) -> Ray:
    """Pull a world ray back into an object's local (canonical) space."""
    o = g.invert_point(ray.origin)
    d = normalize(g.invert_direction(ray.direction))
    return Ray(o, d)


def transform_rays_to_local(g: RigidTransform, origins: np.ndarray,
                            dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched transform_ray_to_local. Rotation preserves norms, so the
    pulled-back directions stay unit length."""
    local_o = g.invert_points(origins)
    local_d = dirs @ g.rotation
    return local_o, local_d


def relax_aabb(box: Aabb, factor: float) -> Aabb:
    """Scale a box about its center. factor >= 1 (boxes only grow)."""
    if factor < 1.0:
        raise ValueError("relaxation factor must be >= 1")
    c, h = box.center, box.half_extents
    return Aabb(c - factor * h, c + factor * h)


def clip_ray_to_aabb(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    """Slab intersection of a ray with a box, restricted to t >= 0.

    Returns (t_enter, t_exit) or None when the ray misses the box entirely
    (including boxes fully behind the origin).
    """
    t0, t1 = _clip_batch(ray.origin[None, :], ray.direction[None, :], box)
    if t1[0] < t0[0]:
        return None
    return float(t0[0]), float(t1[0])


def _clip_batch(origins: np.ndarray, dirs: np.ndarray, box: Aabb) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized slab clip. Misses are encoded as t_exit < t_enter."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (box.min[None, :] - origins) * inv
        tb = (box.max[None, :] - origins) * inv
    # Parallel-axis rays: inv = +-inf gives ta/tb = +-inf (correct) unless the
    # origin sits exactly on a slab plane, where 0 * inf = nan; treat that
    # boundary case as inside the slab.
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_enter = np.maximum(lo.max(axis=1), 0.0)
    t_exit = hi.min(axis=1)
    return t_enter, t_exit


def clip_rays_to_aabb(origins: np.ndarray, dirs: np.ndarray,
                      box: Aabb) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched slab clip: (t_enter, t_exit, hit_mask)."""
    t0, t1 = _clip_batch(origins, dirs, box)
    return t0, t1, t1 >= t0


def sample_ray_points(ray: Ray, box: Aabb) -> RaySampleTuple:
    """16 evenly spaced points over the ray's clipped span inside `box`,
    normalized to the box's [-1, 1]^3 coordinates.

    A grazing hit with t_enter == t_exit degenerates to 16 identical points.
    """
    span = clip_ray_to_aabb(ray, box)
    if span is None:
        return RaySampleTuple(points=None, hit_box=False)
    t0, t1 = span
    ts = np.linspace(t0, t1, N_RAY_POINTS)
    pts = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    half = np.where(box.half_extents > 0, box.half_extents, 1.0)
    pts = (pts - box.center[None, :]) / half[None, :]
    return RaySampleTuple(points=pts, hit_box=True)


def positional_encode(sample: RaySampleTuple) -> np.ndarray:
    """Sinusoidal features for one ray tuple: 1008 reals.

    Layout per point, per coordinate p: [p, sin(2^0 pi p), cos(2^0 pi p), ...,
    sin(2^9 pi p), cos(2^9 pi p)] (21 values), coordinates x, y, z in order,
    points concatenated in sample order.
    """
    if not sample.hit_box:
        raise ValueError("cannot encode a ray that misses the sampling box")
    return encode_points_batch(sample.points[None, :, :])[0]


def encode_points_batch(points: np.ndarray) -> np.ndarray:
    """Encode (N, 16, 3) normalized sample points into (N, 1008) features."""
    n = points.shape[0]
    freqs = (2.0 ** np.arange(ENCODING_LEVELS)) * np.pi  # (L,)
    ang = points[:, :, :, None] * freqs[None, None, None, :]  # (N, 16, 3, L)
    per_coord = np.empty(points.shape[:3] + (1 + 2 * ENCODING_LEVELS,), dtype=np.float64)
    per_coord[..., 0] = points
    per_coord[..., 1::2] = np.sin(ang)
    per_coord[..., 2::2] = np.cos(ang)
    return per_coord.reshape(n, ENCODED_DIM)


def sample_and_encode_rays(origins: np.ndarray, dirs: np.ndarray,
                           box: Aabb) -> tuple[np.ndarray, np.ndarray]:
    """Batched sample_ray_points + positional_encode with the box-miss early out.

    Returns (features, hit_mask); features has one row per input ray and is
    zero-filled (never evaluated downstream) for rays that miss the box.
    """
    t0, t1, hit = clip_rays_to_aabb(origins, dirs, box)
    feats = np.zeros((origins.shape[0], ENCODED_DIM), dtype=np.float64)
    if not np.any(hit):
        return feats, hit
    o, d = origins[hit], dirs[hit]
    steps = np.linspace(0.0, 1.0, N_RAY_POINTS)
    ts = t0[hit, None] + (t1[hit] - t0[hit])[:, None] * steps[None, :]
    pts = o[:, None, :] + ts[:, :, None] * d[:, None, :]
    half = np.where(box.half_extents > 0, box.half_extents, 1.0)
    pts = (pts - box.center[None, None, :]) / half[None, None, :]
    feats[hit] = encode_points_batch(pts)
    return feats, hit
