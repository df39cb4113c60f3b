"""Minimal dense-network stack for the intersection classifier.

A hand-rolled forward/backward over numpy matmuls: linear layers, additive
residual blocks, stabilized sigmoid cross-entropy, and Adam. No autodiff
graph — the model topology is fixed (head, N residual blocks, two output
branches), so the reverse pass is written out explicitly and checked against
finite differences in the tests.

Parameters live in float64 in memory; the model file stores float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MODEL_MAGIC = b"NEDM"
MODEL_VERSION = 1


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @staticmethod
    def init(rng: np.random.Generator, n_in: int, n_out: int) -> "LinearLayer":
        # Kaiming-uniform fan-in bound, zero bias
        bound = np.sqrt(6.0 / n_in)
        return LinearLayer(weight=rng.uniform(-bound, bound, size=(n_out, n_in)),
                           bias=np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class ResidualBlock:
    fc1: LinearLayer
    fc2: LinearLayer

    @staticmethod
    def init(rng: np.random.Generator, d: int) -> "ResidualBlock":
        return ResidualBlock(LinearLayer.init(rng, d, d), LinearLayer.init(rng, d, d))


@dataclass
class MlpModel:
    """Head (D_i -> D_f), additive residual body, two output branches.

    Branch A emits the coarse-bin logits plus the hit logit (N_c + 1 units,
    hit logit last); branch B emits the fine-bin logits (N_f units).
    """

    head: LinearLayer
    blocks: list[ResidualBlock]
    tail_a: LinearLayer
    tail_b: LinearLayer

    @staticmethod
    def init(rng: np.random.Generator, d_in: int = 1008, d_feat: int = 256,
             n_blocks: int = 16, n_coarse: int = 64, n_fine: int = 128) -> "MlpModel":
        return MlpModel(
            head=LinearLayer.init(rng, d_in, d_feat),
            blocks=[ResidualBlock.init(rng, d_feat) for _ in range(n_blocks)],
            tail_a=LinearLayer.init(rng, d_feat, n_coarse + 1),
            tail_b=LinearLayer.init(rng, d_feat, n_fine),
        )

    @property
    def d_in(self) -> int:
        return self.head.n_in

    @property
    def d_feat(self) -> int:
        return self.head.n_out

    @property
    def n_coarse(self) -> int:
        return self.tail_a.n_out - 1

    @property
    def n_fine(self) -> int:
        return self.tail_b.n_out

    def layers(self) -> list[LinearLayer]:
        out = [self.head]
        for b in self.blocks:
            out.extend((b.fc1, b.fc2))
        out.extend((self.tail_a, self.tail_b))
        return out

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in the fixed traversal order used by the
        optimizer and the file format."""
        out = []
        for layer in self.layers():
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def forward(model: MlpModel, batch: np.ndarray):
    """Run the classifier on a (B, D_i) batch.

    Returns (logits_coarse, logits_fine, logit_alpha, cache); the cache holds
    the activations backward() needs and is tied to this model instance.
    """
    if batch.ndim != 2 or batch.shape[1] != model.d_in:
        raise ValueError(f"batch must be (B, {model.d_in}), got {batch.shape}")
    x = model.head(batch)
    block_acts = []
    for blk in model.blocks:
        a1 = blk.fc1(x)
        h1 = np.maximum(a1, 0.0)
        a2 = blk.fc2(h1)
        h2 = np.maximum(a2, 0.0)
        block_acts.append((x, a1, h1, a2))
        x = x + h2
    out_a = model.tail_a(x)
    logits_f = model.tail_b(x)
    cache = {"model": model, "input": batch, "blocks": block_acts, "feat": x}
    return out_a[:, :-1], logits_f, out_a[:, -1:], cache


def backward(model: MlpModel, cache: dict, grad_coarse: np.ndarray,
             grad_fine: np.ndarray, grad_alpha: np.ndarray) -> list[np.ndarray]:
    """Exact reverse-mode gradients; returns arrays parallel to
    model.parameters()."""
    if cache.get("model") is not model:
        raise ValueError("cache does not belong to this model")
    feat = cache["feat"]
    g_a = np.concatenate([grad_coarse, grad_alpha], axis=1)
    grads_tail_a = (g_a.T @ feat, g_a.sum(axis=0))
    grads_tail_b = (grad_fine.T @ feat, grad_fine.sum(axis=0))
    g_x = g_a @ model.tail_a.weight + grad_fine @ model.tail_b.weight

    block_grads = []
    for blk, (x, a1, h1, a2) in zip(reversed(model.blocks), reversed(cache["blocks"])):
        g_a2 = np.where(a2 > 0, g_x, 0.0)
        grads_fc2 = (g_a2.T @ h1, g_a2.sum(axis=0))
        g_h1 = g_a2 @ blk.fc2.weight
        g_a1 = np.where(a1 > 0, g_h1, 0.0)
        grads_fc1 = (g_a1.T @ x, g_a1.sum(axis=0))
        block_grads.append((grads_fc1, grads_fc2))
        g_x = g_x + g_a1 @ blk.fc1.weight  # identity skip adds through

    grads_head = (g_x.T @ cache["input"], g_x.sum(axis=0))

    flat: list[np.ndarray] = [grads_head[0], grads_head[1]]
    for grads_fc1, grads_fc2 in reversed(block_grads):
        flat.extend((grads_fc1[0], grads_fc1[1], grads_fc2[0], grads_fc2[1]))
    flat.extend((grads_tail_a[0], grads_tail_a[1], grads_tail_b[0], grads_tail_b[1]))
    return flat


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(logits: np.ndarray, targets: np.ndarray,
             row_mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean sigmoid cross-entropy and its logit gradient.

    Uses the log-sum-exp form max(z,0) - z*t + log(1 + exp(-|z|)) so finite
    logits can never produce a NaN. With row_mask, excluded rows contribute
    neither to the mean nor to the gradient.
    """
    per_elem = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = sigmoid(logits) - targets
    if row_mask is not None:
        per_elem = per_elem * row_mask[:, None]
        grad = grad * row_mask[:, None]
        count = int(row_mask.sum()) * logits.shape[1]
    else:
        count = logits.size
    if count == 0:
        return 0.0, np.zeros_like(logits)
    return float(per_elem.sum() / count), grad / count


@dataclass
class AdamState:
    """Standard Adam with bias correction over a flat parameter list."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def for_params(params: list[np.ndarray], lr: float = 5e-4) -> "AdamState":
        return AdamState(lr=lr,
                         m=[np.zeros_like(p) for p in params],
                         v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("parameter/gradient/moment lists must align")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def save_model(model: MlpModel, path, half_range: float = 0.0,
               extra: bytes = b"") -> None:
    """Write the parameter file: magic, version, dims, the classifier
    half-range, then float32 parameters in traversal order."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<IIIIII", MODEL_VERSION, model.d_in, model.d_feat,
                            len(model.blocks), model.n_coarse, model.n_fine))
        f.write(struct.pack("<f", half_range))
        for p in model.parameters():
            f.write(p.astype("<f4").tobytes(order="C"))
        f.write(extra)


def load_model(path, trailing_bytes: int = 0) -> tuple[MlpModel, float, bytes]:
    """Read a parameter file; returns (model, half_range, trailing).

    The file length must match the declared dimensions exactly, apart from
    `trailing_bytes` reserved for embedding formats.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    if len(raw) < 4 + 24 + 4:
        raise FormatError(f"{path}: truncated header")
    version, d_in, d_feat, n_blocks, n_coarse, n_fine = struct.unpack_from("<IIIIII", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (half_range,) = struct.unpack_from("<f", raw, 28)
    rng = np.random.default_rng(0)
    model = MlpModel.init(rng, d_in, d_feat, n_blocks, n_coarse, n_fine)
    off = 32
    n_param_bytes = sum(4 * p.size for p in model.parameters())
    if len(raw) != off + n_param_bytes + trailing_bytes:
        raise FormatError(
            f"{path}: expected {off + n_param_bytes + trailing_bytes} bytes "
            f"for dims ({d_in},{d_feat},{n_blocks},{n_coarse},{n_fine}), "
            f"found {len(raw)}")
    for layer in model.layers():
        for attr in ("weight", "bias"):
            shape = getattr(layer, attr).shape
            size = int(np.prod(shape))
            vals = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
            setattr(layer, attr, vals.reshape(shape).astype(np.float64))
            off += 4 * size
    return model, float(half_range), raw[off:]
