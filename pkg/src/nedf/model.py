"""Depth-field models: bin quantization, distillation training, and queries.

A depth field maps a ray to the signed offset mu between the ray's tangency
point (closest approach to the local origin) and its first surface
intersection, plus a hit flag. mu lives in [-l, l] and is quantized by a
two-level classifier: a coarse bin of N_c over the full range and a fine bin
of N_f subdividing one coarse bin. Training distills a ground-truth depth
oracle into the classifier; inference decodes argmax bins back to mu and then
to world-space depth.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import TrainingDiverged
from .fields import DepthOracle
from .geometry import (
    Aabb,
    Ray,
    RigidTransform,
    relax_aabb,
    sample_and_encode_rays,
    tangency_dist_batch,
    tangency_frame,
)

log = logging.getLogger(__name__)

DEFAULT_RELAX_FACTOR = 1.5


@dataclass(frozen=True)
class ClassifierConfig:
    """Quantization grid for mu: range [-l, l], N_c coarse x N_f fine bins."""

    half_range: float
    n_coarse: int = 64
    n_fine: int = 128

    def __post_init__(self):
        if not self.half_range > 0:
            raise ValueError("half_range must be positive")
        if self.n_coarse < 2 or self.n_fine < 2:
            raise ValueError("need at least 2 bins per level")

    @property
    def lambda1(self) -> float:
        """Coarse decode step: the full range width 2l."""
        return 2.0 * self.half_range

    @property
    def lambda2(self) -> float:
        """Fine decode step: one coarse bin width 2l / N_c."""
        return 2.0 * self.half_range / self.n_coarse

    @property
    def fine_width(self) -> float:
        """Resolution of the full two-level grid: 2l / (N_c * N_f)."""
        return 2.0 * self.half_range / (self.n_coarse * self.n_fine)


@dataclass(frozen=True)
class BinPair:
    coarse: int
    fine: int


def segment_batch(mu: np.ndarray, cfg: ClassifierConfig) -> tuple[np.ndarray, np.ndarray]:
    """Quantize mu values (clamped to [-l, l]) into coarse/fine bin indices."""
    l = cfg.half_range
    u = (np.clip(mu, -l, l) + l) / (2.0 * l)
    scaled = u * cfg.n_coarse
    coarse = np.minimum(scaled.astype(int), cfg.n_coarse - 1)
    fine = np.minimum(((scaled - coarse) * cfg.n_fine).astype(int), cfg.n_fine - 1)
    return coarse, fine


def segment(mu: float, cfg: ClassifierConfig) -> BinPair:
    coarse, fine = segment_batch(np.asarray([mu], dtype=np.float64), cfg)
    return BinPair(coarse=int(coarse[0]), fine=int(fine[0]))


def unsegment_batch(coarse: np.ndarray, fine: np.ndarray, cfg: ClassifierConfig) -> np.ndarray:
    """Decode bin indices to the lower edge of the fine cell."""
    return (cfg.lambda1 * (coarse / cfg.n_coarse)
            + cfg.lambda2 * (fine / cfg.n_fine) - cfg.half_range)


def unsegment(bins: BinPair, cfg: ClassifierConfig) -> float:
    if not (0 <= bins.coarse < cfg.n_coarse and 0 <= bins.fine < cfg.n_fine):
        raise ValueError("bin indices out of range")
    return float(unsegment_batch(np.asarray([bins.coarse], dtype=np.float64),
                                 np.asarray([bins.fine], dtype=np.float64), cfg)[0])


@dataclass
class NedfModel:
    """A trained (or trainable) depth field for one object."""

    mlp: nn.MlpModel
    config: ClassifierConfig
    relaxed_box: Aabb
    alpha_threshold: float = 0.5

    def __post_init__(self):
        if self.mlp.n_coarse != self.config.n_coarse or self.mlp.n_fine != self.config.n_fine:
            raise ValueError("classifier head sizes do not match the bin config")

    @property
    def fine_width(self) -> float:
        return self.config.fine_width


@dataclass(frozen=True)
class TrainProfile:
    """Network size and optimization budget."""

    d_feat: int
    n_blocks: int
    batch_size: int
    iterations: int
    lr: float = 5e-4


# Desk profile trains in minutes on a CPU; the full-size profile keeps the
# published hyperparameters (trim iterations to taste before using it).
PROFILES = {
    "desk": TrainProfile(d_feat=64, n_blocks=4, batch_size=1024, iterations=3000),
    "paper": TrainProfile(d_feat=256, n_blocks=16, batch_size=4096, iterations=600_000),
}


def new_model(oracle: DepthOracle, rng: np.random.Generator,
              profile: TrainProfile = PROFILES["desk"],
              relax_factor: float = DEFAULT_RELAX_FACTOR,
              n_coarse: int = 64, n_fine: int = 128) -> NedfModel:
    """Fresh model sized for an oracle: the sampling box is the oracle's
    bounding box relaxed by `relax_factor`, and l is its half-diagonal so
    every in-box intersection has mu in range."""
    box = relax_aabb(oracle.bounding_box, relax_factor)
    cfg = ClassifierConfig(half_range=box.half_diagonal, n_coarse=n_coarse, n_fine=n_fine)
    mlp = nn.MlpModel.init(rng, d_in=1008, d_feat=profile.d_feat,
                           n_blocks=profile.n_blocks, n_coarse=n_coarse, n_fine=n_fine)
    return NedfModel(mlp=mlp, config=cfg, relaxed_box=box)


@dataclass
class RaySampler:
    """Draws supervision rays that cross the model's relaxed box.

    direct mode: origins on a sphere around the box, targets uniform in the
    box. views mode: origins restricted to a fixed set of random viewpoints
    on that sphere (camera-like supervision).
    """

    box: Aabb
    mode: str = "direct"
    n_views: int = 500
    _views: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("direct", "views"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")

    def _sphere_points(self, rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.box.center + 2.5 * self.box.half_diagonal * v

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "views":
            if self._views is None:
                self._views = self._sphere_points(rng, self.n_views)
            origins = self._views[rng.integers(0, self.n_views, size=n)]
        else:
            origins = self._sphere_points(rng, n)
        targets = rng.uniform(self.box.min, self.box.max, size=(n, 3))
        dirs = targets - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return origins, dirs


@dataclass
class TrainingSampleBatch:
    encoded: np.ndarray  # (B, 1008)
    target_coarse: np.ndarray  # (B, N_c) one-hot, zero rows on misses
    target_fine: np.ndarray  # (B, N_f)
    target_alpha: np.ndarray  # (B, 1) in {0, 1}
    valid_mu: np.ndarray  # (B,) bool: hit rays with defined mu


def build_training_batch(oracle: DepthOracle, sampler: RaySampler,
                         cfg: ClassifierConfig, rng: np.random.Generator,
                         batch_size: int = 4096) -> TrainingSampleBatch:
    """Draw rays, run the oracle, and quantize its depths into targets.

    Miss rays carry only the alpha target; their bin rows are zero and
    excluded from the bin losses via valid_mu.
    """
    origins, dirs = sampler.sample(rng, batch_size)
    feats, hit_box = sample_and_encode_rays(origins, dirs, sampler.box)
    if not hit_box.all():
        # sampler guarantees box crossings up to float slop; redraw stragglers
        retry = ~hit_box
        origins[retry], dirs[retry] = sampler.sample(rng, int(retry.sum()))
        feats, hit_box = sample_and_encode_rays(origins, dirs, sampler.box)
        keep = hit_box
        origins, dirs, feats = origins[keep], dirs[keep], feats[keep]

    depth, hit = oracle.trace(origins, dirs)
    mu = tangency_dist_batch(origins, dirs) - depth
    n = origins.shape[0]
    target_coarse = np.zeros((n, cfg.n_coarse))
    target_fine = np.zeros((n, cfg.n_fine))
    if hit.any():
        coarse, fine = segment_batch(mu[hit], cfg)
        rows = np.flatnonzero(hit)
        target_coarse[rows, coarse] = 1.0
        target_fine[rows, fine] = 1.0
    return TrainingSampleBatch(
        encoded=feats,
        target_coarse=target_coarse,
        target_fine=target_fine,
        target_alpha=hit.astype(np.float64)[:, None],
        valid_mu=hit,
    )


ALPHA_LOSS_WEIGHT = 0.1


def loss_and_grads(mlp: nn.MlpModel, batch: TrainingSampleBatch):
    """Total loss BCE_coarse + BCE_fine + 0.1 * BCE_alpha and its gradients."""
    lc, lf, la, cache = nn.forward(mlp, batch.encoded)
    mask = batch.valid_mu.astype(np.float64)
    loss_c, g_c = nn.bce_loss(lc, batch.target_coarse, row_mask=mask)
    loss_f, g_f = nn.bce_loss(lf, batch.target_fine, row_mask=mask)
    loss_a, g_a = nn.bce_loss(la, batch.target_alpha)
    total = loss_c + loss_f + ALPHA_LOSS_WEIGHT * loss_a
    grads = nn.backward(mlp, cache, g_c, g_f, ALPHA_LOSS_WEIGHT * g_a)
    return total, (loss_c, loss_f, loss_a), grads


def train(model: NedfModel, oracle: DepthOracle, rng: np.random.Generator,
          iterations: int = 3000, batch_size: int = 1024, lr: float = 5e-4,
          sampler_mode: str = "direct",
          progress_every: int = 0) -> list[float]:
    """Distill the oracle into the model; returns the per-iteration loss."""
    ob = oracle.bounding_box
    if not (model.relaxed_box.contains(ob.min, tol=1e-9)
            and model.relaxed_box.contains(ob.max, tol=1e-9)):
        raise ValueError("oracle geometry escapes the model's relaxed box")
    sampler = RaySampler(box=model.relaxed_box, mode=sampler_mode)
    params = model.mlp.parameters()
    state = nn.AdamState.for_params(params, lr=lr)
    losses = []
    for it in range(iterations):
        batch = build_training_batch(oracle, sampler, model.config, rng, batch_size)
        total, parts, grads = loss_and_grads(model.mlp, batch)
        if not np.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: "
                f"coarse={parts[0]} fine={parts[1]} alpha={parts[2]}")
        nn.adam_step(state, params, grads)
        losses.append(total)
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d/%d loss %.4f", it + 1, iterations, total)
    return losses


def query_rays(model: NedfModel, origins: np.ndarray,
               dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched local-space query: (mu, alpha) per ray.

    Rays that miss the relaxed box never reach the network; their mu is NaN
    and alpha False. Argmax ties resolve to the lowest bin index.
    """
    feats, hit_box = sample_and_encode_rays(origins, dirs, model.relaxed_box)
    mu = np.full(origins.shape[0], np.nan)
    alpha = np.zeros(origins.shape[0], dtype=bool)
    if hit_box.any():
        lc, lf, la, _ = nn.forward(model.mlp, feats[hit_box])
        coarse = lc.argmax(axis=1)
        fine = lf.argmax(axis=1)
        mu[hit_box] = unsegment_batch(coarse, fine, model.config)
        alpha[hit_box] = nn.sigmoid(la[:, 0]) > model.alpha_threshold
    return mu, alpha


def query(model: NedfModel, local_ray: Ray) -> tuple[float, bool]:
    mu, alpha = query_rays(model, local_ray.origin[None, :], local_ray.direction[None, :])
    return float(mu[0]), bool(alpha[0])


def query_depth_world_batch(model: NedfModel, g: RigidTransform, origins: np.ndarray,
                            dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space depth for a batch of world rays against a placed object.

    The world tangency distance is taken about the object's world-space
    center (the image of the local origin under g): |(o - T) . d|. Depth is
    that distance minus s * mu. Non-positive depths on predicted hits are
    demoted to misses.
    """
    local_o = g.invert_points(origins)
    local_d = dirs @ g.rotation
    mu, alpha = query_rays(model, local_o, local_d)
    dist_w = tangency_dist_batch(origins - g.translation, dirs)
    depth = dist_w - g.scale * mu
    bad = alpha & ~(depth > 0)
    if bad.any():
        log.debug("demoting %d non-positive depth predictions to misses", int(bad.sum()))
        alpha = alpha & (depth > 0)
    return depth, alpha


def query_depth_world(model: NedfModel, world_ray: Ray,
                      g: RigidTransform) -> tuple[float, bool]:
    depth, alpha = query_depth_world_batch(model, g, world_ray.origin[None, :],
                                           world_ray.direction[None, :])
    return float(depth[0]), bool(alpha[0])


def evaluate(model: NedfModel, oracle: DepthOracle, rng: np.random.Generator,
             n_rays: int = 4096, sampler_mode: str = "direct") -> dict:
    """Held-out quality: depth error quantiles on agreed hits, mask accuracy."""
    sampler = RaySampler(box=model.relaxed_box, mode=sampler_mode)
    origins, dirs = sampler.sample(rng, n_rays)
    ref_depth, ref_hit = oracle.trace(origins, dirs)
    mu, alpha = query_rays(model, origins, dirs)
    dist = tangency_dist_batch(origins, dirs)
    pred_depth = dist - mu
    both = ref_hit & alpha
    err = np.abs(pred_depth[both] - ref_depth[both])
    return {
        "mask_accuracy": float((ref_hit == alpha).mean()),
        "n_rays": int(n_rays),
        "n_agreed_hits": int(both.sum()),
        "median_depth_error": float(np.median(err)) if err.size else float("nan"),
        "p90_depth_error": float(np.quantile(err, 0.9)) if err.size else float("nan"),
        "fine_bin_width": model.fine_width,
    }


# --------------------------------------------------------------------------
# Persistence: the nn parameter file plus box and alpha threshold trailer
# --------------------------------------------------------------------------

_TRAILER_FMT = "<7f"
_TRAILER_BYTES = struct.calcsize(_TRAILER_FMT)


def save_nedf(model: NedfModel, path) -> None:
    trailer = struct.pack(_TRAILER_FMT, *model.relaxed_box.min, *model.relaxed_box.max,
                          model.alpha_threshold)
    nn.save_model(model.mlp, path, half_range=model.config.half_range, extra=trailer)


def load_nedf(path) -> NedfModel:
    mlp, half_range, trailer = nn.load_model(path, trailing_bytes=_TRAILER_BYTES)
    vals = struct.unpack(_TRAILER_FMT, trailer)
    box = Aabb(np.array(vals[0:3], dtype=np.float64), np.array(vals[3:6], dtype=np.float64))
    cfg = ClassifierConfig(half_range=half_range, n_coarse=mlp.n_coarse, n_fine=mlp.n_fine)
    return NedfModel(mlp=mlp, config=cfg, relaxed_box=box, alpha_threshold=float(vals[6]))
