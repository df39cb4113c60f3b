"""Ground-truth depth and appearance oracles.

Two oracle families stand in for learned radiance fields at desk scale:

* analytic signed-distance primitives queried by sphere tracing, with a
  procedural color map and an sdf-derived density; and
* voxel grids of density/color integrated with the standard
  emission-absorption quadrature (expected-depth and color variants).

Both expose the same two queries the renderer needs: first-intersection depth
along a ray, and (color, density) at a point. Fields are immutable after
construction; every query is pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .geometry import Aabb, Ray, RigidTransform, clip_rays_to_aabb

SURFACE_EPS = 1e-5
MAX_TRACE_STEPS = 512

# Density model for analytic primitives: a guaranteed-opaque band around the
# surface plus a steep ramp inside, so single-point shading sees sigma >=
# SIGMA_SURFACE at any correctly predicted surface point.
SIGMA_SURFACE = 50.0
SURFACE_BAND = 0.02
INTERIOR_STEEPNESS = 1000.0


@dataclass(frozen=True)
class HitRecord:
    depth: float
    point: np.ndarray | None
    hit: bool


@dataclass(frozen=True)
class FieldSample:
    color: np.ndarray
    sigma: float


# ---------------------------------------------------------------------------
# Analytic signed-distance primitives
# ---------------------------------------------------------------------------

class SdfPrimitive:
    """Base for analytic shapes. Subclasses implement the batched signed
    distance (negative inside) and an axis-aligned bounding box."""

    def sdf(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> Aabb:
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(SdfPrimitive):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, points):
        return np.linalg.norm(points - self.center, axis=-1) - self.radius

    def bounding_box(self):
        r = np.full(3, self.radius)
        return Aabb(self.center - r, self.center + r)


@dataclass(frozen=True)
class BoxPrim(SdfPrimitive):
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "half_extents",
                           np.asarray(self.half_extents, dtype=np.float64))
        if not np.all(self.half_extents > 0):
            raise ValueError("box half extents must be positive")

    def sdf(self, points):
        q = np.abs(points - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounding_box(self):
        return Aabb(self.center - self.half_extents, self.center + self.half_extents)


@dataclass(frozen=True)
class Torus(SdfPrimitive):
    """Torus around the local y axis: ring of radius major_r in the xz plane,
    tube radius minor_r."""

    center: np.ndarray
    major_r: float
    minor_r: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not (self.major_r > 0 and self.minor_r > 0):
            raise ValueError("torus radii must be positive")

    def sdf(self, points):
        p = points - self.center
        ring = np.hypot(np.hypot(p[..., 0], p[..., 2]) - self.major_r, p[..., 1])
        return ring - self.minor_r

    def bounding_box(self):
        r = self.major_r + self.minor_r
        ext = np.array([r, self.minor_r, r])
        return Aabb(self.center - ext, self.center + ext)


@dataclass(frozen=True)
class Plane(SdfPrimitive):
    """Half-space boundary: sdf(p) = n.p - offset. Unbounded, so it has no
    finite bounding box and cannot anchor a distilled depth model; it exists
    for union geometry and analytic shadow receivers."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)

    def sdf(self, points):
        return points @ self.normal - self.offset

    def bounding_box(self):
        raise ValueError("a plane has no finite bounding box")


@dataclass(frozen=True)
class Union(SdfPrimitive):
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("union needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))

    def sdf(self, points):
        return np.minimum.reduce([c.sdf(points) for c in self.children])

    def bounding_box(self):
        boxes = [c.bounding_box() for c in self.children]
        return Aabb(np.minimum.reduce([b.min for b in boxes]),
                    np.maximum.reduce([b.max for b in boxes]))


@dataclass(frozen=True)
class Transformed(SdfPrimitive):
    """Child primitive placed by a rigid transform; distances scale by s."""

    child: SdfPrimitive
    transform: RigidTransform

    def sdf(self, points):
        local = self.transform.invert_points(points)
        return self.transform.scale * self.child.sdf(local)

    def bounding_box(self):
        b = self.child.bounding_box()
        corners = np.array([[x, y, z] for x in (b.min[0], b.max[0])
                            for y in (b.min[1], b.max[1])
                            for z in (b.min[2], b.max[2])])
        world = self.transform.apply_points(corners)
        return Aabb(world.min(axis=0), world.max(axis=0))


def sdf_eval(prim: SdfPrimitive, p: np.ndarray) -> float:
    """Signed distance of a single point (negative inside)."""
    return float(prim.sdf(np.asarray(p, dtype=np.float64)[None, :])[0])


def sphere_trace_batch(prim: SdfPrimitive, origins: np.ndarray, dirs: np.ndarray,
                       t_max: float) -> tuple[np.ndarray, np.ndarray]:
    """March each ray by its signed distance until the surface or t_max.

    Returns (depth, hit). Marching cannot overshoot a surface because each
    step equals the distance to the nearest one; after convergence a few
    secant iterations polish the root so grazing hits stay accurate.
    """
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    # origins strictly inside a surface count as immediate hits at depth 0
    start_inside = prim.sdf(origins) <= -SURFACE_EPS
    hit[start_inside] = True
    active = ~start_inside
    for _ in range(MAX_TRACE_STEPS):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = prim.sdf(p)
        converged = np.abs(d) < SURFACE_EPS
        idx = np.flatnonzero(active)
        hit[idx[converged]] = True
        t[idx] += np.where(converged, 0.0, d)
        active[idx] = ~converged & (t[idx] <= t_max)
    refine = hit & ~start_inside
    if refine.any():
        t[refine] = _secant_refine(prim, origins[refine], dirs[refine], t[refine])
    return t, hit


def _secant_refine(prim, origins, dirs, t, iters: int = 6):
    """Secant root-polish of f(t) = sdf(o + t d) starting at a converged t."""
    t0 = t - SURFACE_EPS
    t1 = t + SURFACE_EPS
    f0 = prim.sdf(origins + t0[:, None] * dirs)
    f1 = prim.sdf(origins + t1[:, None] * dirs)
    for _ in range(iters):
        denom = f1 - f0
        safe = np.abs(denom) > 1e-300
        t2 = np.where(safe, t1 - f1 * (t1 - t0) / np.where(safe, denom, 1.0), t1)
        t0, f0 = t1, f1
        t1 = t2
        f1 = prim.sdf(origins + t1[:, None] * dirs)
    return np.maximum(t1, 0.0)


def sphere_trace(prim: SdfPrimitive, ray: Ray, t_max: float) -> HitRecord:
    depth, hit = sphere_trace_batch(prim, ray.origin[None, :],
                                    ray.direction[None, :], t_max)
    if not hit[0]:
        return HitRecord(depth=float("inf"), point=None, hit=False)
    return HitRecord(depth=float(depth[0]), point=ray.at(float(depth[0])), hit=True)


def analytic_sigma(prim: SdfPrimitive, points: np.ndarray) -> np.ndarray:
    """Density derived from the signed distance: steep ramp inside plus an
    opaque band of width SURFACE_BAND straddling the surface."""
    d = prim.sdf(points)
    sigma = INTERIOR_STEEPNESS * np.maximum(0.0, -d)
    return np.where(np.abs(d) < SURFACE_BAND, np.maximum(sigma, SIGMA_SURFACE), sigma)


def procedural_color(points: np.ndarray) -> np.ndarray:
    """Position-derived debug coloring: c = clamp((p + 1) / 2)."""
    return np.clip((points + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Voxel fields
# ---------------------------------------------------------------------------

VOXEL_MAGIC = b"NVXF"
VOXEL_VERSION = 1


@dataclass(frozen=True)
class VoxelField:
    """Density/color samples at voxel centers on a regular grid.

    Trilinear interpolation between centers; queries clamp to the border
    half-cell so a query at an exact voxel center returns the stored value.
    """

    resolution: tuple[int, int, int]
    bounds: Aabb
    density: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.resolution
        if min(nx, ny, nz) < 1:
            raise ValueError("voxel resolution must be positive")
        if self.density.shape != (nx, ny, nz):
            raise ValueError("density shape does not match resolution")
        if self.color.shape != (nx, ny, nz, 3):
            raise ValueError("color shape does not match resolution")
        if np.any(self.density < 0):
            raise ValueError("densities must be non-negative")

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear (color, sigma) at world points; zero outside bounds."""
        res = np.array(self.resolution, dtype=np.float64)
        size = self.bounds.max - self.bounds.min
        # continuous voxel coordinate: center i sits at (i + 0.5) * cell
        u = (points - self.bounds.min) / size * res - 0.5
        inside = np.all((points >= self.bounds.min) & (points <= self.bounds.max), axis=-1)
        u = np.clip(u, 0.0, res - 1.0)
        i0 = np.clip(np.floor(u).astype(int), 0, np.array(self.resolution) - 1)
        frac = u - i0
        sigma = np.zeros(points.shape[0])
        rgb = np.zeros((points.shape[0], 3))
        for corner in range(8):
            dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
            ix = np.minimum(i0[:, 0] + dx, self.resolution[0] - 1)
            iy = np.minimum(i0[:, 1] + dy, self.resolution[1] - 1)
            iz = np.minimum(i0[:, 2] + dz, self.resolution[2] - 1)
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
            w = wx * wy * wz
            sigma += w * self.density[ix, iy, iz]
            rgb += w[:, None] * self.color[ix, iy, iz]
        sigma[~inside] = 0.0
        rgb[~inside] = 0.0
        return rgb, sigma


def save_voxel_field(vf: VoxelField, path) -> None:
    nx, ny, nz = vf.resolution
    with open(path, "wb") as f:
        f.write(VOXEL_MAGIC)
        f.write(struct.pack("<IIII", VOXEL_VERSION, nx, ny, nz))
        f.write(struct.pack("<6f", *vf.bounds.min, *vf.bounds.max))
        f.write(vf.density.astype("<f4").tobytes(order="C"))
        f.write(vf.color.astype("<f4").tobytes(order="C"))


def load_voxel_field(path) -> VoxelField:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOXEL_MAGIC:
        raise FormatError(f"{path}: not a voxel field file")
    if len(raw) < 4 + 16 + 24:
        raise FormatError(f"{path}: truncated header")
    version, nx, ny, nz = struct.unpack_from("<IIII", raw, 4)
    if version != VOXEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    bounds = struct.unpack_from("<6f", raw, 20)
    off = 44
    n = nx * ny * nz
    need = off + 4 * n + 12 * n
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    density = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(nx, ny, nz)
    color = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off + 4 * n)
    color = color.reshape(nx, ny, nz, 3)
    return VoxelField(
        resolution=(nx, ny, nz),
        bounds=Aabb(np.array(bounds[:3], dtype=np.float64),
                    np.array(bounds[3:], dtype=np.float64)),
        density=density.astype(np.float64),
        color=color.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Emission-absorption quadrature
# ---------------------------------------------------------------------------

def _quadrature_weights(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Per-sample weights w_i = T_i (1 - exp(-sigma_i delta)) with
    T_i = exp(-sum_{j<i} sigma_j delta). sigma is (N, S), delta is (N,)."""
    tau = sigma * delta[:, None]
    trans = np.exp(-np.concatenate([np.zeros((sigma.shape[0], 1)),
                                    np.cumsum(tau[:, :-1], axis=1)], axis=1))
    return trans * (1.0 - np.exp(-tau))


def volume_depth_batch(sample_sigma, origins: np.ndarray, dirs: np.ndarray,
                       t_n, t_f, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Expected termination depth sum_i w_i t_i |d| and its mass sum_i w_i.

    `sample_sigma(points) -> (N*S,)` supplies densities; t_n/t_f may be
    scalars or per-ray arrays. Midpoint samples on n equal subintervals.
    """
    n = origins.shape[0]
    t_n = np.broadcast_to(np.asarray(t_n, dtype=np.float64), (n,))
    t_f = np.broadcast_to(np.asarray(t_f, dtype=np.float64), (n,))
    delta = (t_f - t_n) / n_samples
    ts = t_n[:, None] + (np.arange(n_samples)[None, :] + 0.5) * delta[:, None]
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    sigma = sample_sigma(pts.reshape(-1, 3)).reshape(n, n_samples)
    w = _quadrature_weights(sigma, delta)
    norm = np.linalg.norm(dirs, axis=1)
    return (w * ts).sum(axis=1) * norm, w.sum(axis=1)


def volume_depth(field: VoxelField, ray: Ray, t_n: float, t_f: float,
                 n_samples: int) -> tuple[float, float]:
    """Expected depth and accumulated opacity along one ray (see
    volume_depth_batch). Zero density everywhere gives (0, 0)."""
    if not t_n < t_f:
        raise ValueError("t_n must be < t_f")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    depth, alpha = volume_depth_batch(lambda p: field.sample(p)[1],
                                      ray.origin[None, :], ray.direction[None, :],
                                      t_n, t_f, n_samples)
    return float(depth[0]), float(alpha[0])


def volume_render_color_batch(sample_fn, origins, dirs, t_n, t_f,
                              n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Emission-absorption color sum_i w_i c_i and alpha, same weights as the
    depth quadrature. `sample_fn(points) -> (rgb, sigma)`."""
    n = origins.shape[0]
    t_n = np.broadcast_to(np.asarray(t_n, dtype=np.float64), (n,))
    t_f = np.broadcast_to(np.asarray(t_f, dtype=np.float64), (n,))
    delta = (t_f - t_n) / n_samples
    ts = t_n[:, None] + (np.arange(n_samples)[None, :] + 0.5) * delta[:, None]
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    rgb, sigma = sample_fn(pts.reshape(-1, 3))
    sigma = sigma.reshape(n, n_samples)
    rgb = rgb.reshape(n, n_samples, 3)
    w = _quadrature_weights(sigma, delta)
    return (w[:, :, None] * rgb).sum(axis=1), w.sum(axis=1)


def volume_render_color(field: VoxelField, ray: Ray, t_n: float, t_f: float,
                        n_samples: int) -> tuple[np.ndarray, float]:
    if not t_n < t_f:
        raise ValueError("t_n must be < t_f")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    rgb, alpha = volume_render_color_batch(field.sample,
                                           ray.origin[None, :], ray.direction[None, :],
                                           t_n, t_f, n_samples)
    return rgb[0], float(alpha[0])


# ---------------------------------------------------------------------------
# Oracle facade: the two queries the rest of the system consumes
# ---------------------------------------------------------------------------

class DepthOracle:
    """Local-space ground truth: first-intersection depth and hit mask."""

    bounding_box: Aabb

    def trace(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def radiance(self, points: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(rgb, sigma) at local points (view direction currently unused)."""
        raise NotImplementedError

    def volume_color(self, origins, dirs, t_n, t_f, n_samples):
        """Full quadrature color fallback for outlier pixels."""
        raise NotImplementedError


@dataclass(frozen=True)
class AnalyticOracle(DepthOracle):
    prim: SdfPrimitive
    t_max: float = 100.0

    @property
    def bounding_box(self) -> Aabb:
        return self.prim.bounding_box()

    def trace(self, origins, dirs):
        return sphere_trace_batch(self.prim, origins, dirs, self.t_max)

    def radiance(self, points, dirs):
        return procedural_color(points), analytic_sigma(self.prim, points)

    def volume_color(self, origins, dirs, t_n, t_f, n_samples):
        return volume_render_color_batch(
            lambda p: (procedural_color(p), analytic_sigma(self.prim, p)),
            origins, dirs, t_n, t_f, n_samples)


@dataclass(frozen=True)
class VoxelOracle(DepthOracle):
    """Depth via the expected-termination quadrature over the grid bounds;
    a ray counts as a hit when its accumulated opacity exceeds 0.5."""

    vf: VoxelField
    n_samples: int = 192
    alpha_threshold: float = 0.5

    @property
    def bounding_box(self) -> Aabb:
        return self.vf.bounds

    def trace(self, origins, dirs):
        t0, t1, crosses = clip_rays_to_aabb(origins, dirs, self.vf.bounds)
        depth = np.zeros(origins.shape[0])
        alpha = np.zeros(origins.shape[0])
        if crosses.any():
            d, a = volume_depth_batch(lambda p: self.vf.sample(p)[1],
                                      origins[crosses], dirs[crosses],
                                      t0[crosses], t1[crosses], self.n_samples)
            depth[crosses] = d
            alpha[crosses] = a
        return depth, alpha > self.alpha_threshold

    def radiance(self, points, dirs):
        rgb, sigma = self.vf.sample(points)
        return rgb, sigma

    def volume_color(self, origins, dirs, t_n, t_f, n_samples):
        return volume_render_color_batch(self.vf.sample, origins, dirs,
                                         t_n, t_f, n_samples)


def mask_of_ray(oracle: DepthOracle, ray: Ray, t_max: float = 100.0) -> int:
    """1 when the oracle considers the ray a surface hit, else 0."""
    _, hit = oracle.trace(ray.origin[None, :], ray.direction[None, :])
    return int(hit[0])


def radiance_at(source, p: np.ndarray, d: np.ndarray) -> FieldSample:
    """(color, density) of a field at one point.

    `source` may be a VoxelField (trilinear lookup), an SdfPrimitive
    (procedural color + sdf-derived density), or any DepthOracle.
    The view direction is accepted for interface parity; the desk-scale
    fields are view-independent.
    """
    p = np.asarray(p, dtype=np.float64)[None, :]
    d = np.asarray(d, dtype=np.float64)[None, :]
    if isinstance(source, VoxelField):
        rgb, sigma = source.sample(p)
    elif isinstance(source, SdfPrimitive):
        rgb, sigma = procedural_color(p), analytic_sigma(source, p)
    else:
        rgb, sigma = source.radiance(p, d)
    return FieldSample(color=rgb[0], sigma=float(sigma[0]))
