"""Buffer import/export formats.

Color goes out as binary PPM (P6) or PNG; depth as a raw little-endian f32
plane with a small header plus a normalized grayscale PNG for eyeballing;
object IDs as 16-bit grayscale PNG (id + 1, zero = no hit). The raw depth
format is also what external G-buffer import consumes.
"""

from __future__ import annotations

import io
import struct

import numpy as np
from PIL import Image

from .errors import FormatError

DEPTH_MAGIC = b"NDPT"


def to_u8(rgb: np.ndarray) -> np.ndarray:
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """rgb is (H, W, 3) in [0, 1]."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(to_u8(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise FormatError(f"{path}: not a binary PPM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit PPM supported")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def encode_color_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_u8(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_color_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(to_u8(rgb), mode="RGB").save(path, format="PNG")


def read_color_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_depth_raw(path, depth: np.ndarray, scale: float = 1.0) -> None:
    """16-byte header (magic, u32 W, u32 H, f32 scale) + row-major f32 plane.
    Misses stay +inf."""
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<IIf", w, h, scale))
        f.write(depth.astype("<f4").tobytes(order="C"))


def read_depth_raw(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a raw depth plane")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    w, h, scale = struct.unpack_from("<IIf", raw, 4)
    if len(raw) != 16 + 4 * w * h:
        raise FormatError(f"{path}: expected {16 + 4 * w * h} bytes, found {len(raw)}")
    plane = np.frombuffer(raw, dtype="<f4", count=w * h, offset=16)
    return plane.reshape(h, w).astype(np.float64), float(scale)


def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    """Normalize a depth plane for viewing: nearest surface bright, farthest
    dark, misses black."""
    finite = np.isfinite(depth)
    out = np.zeros(depth.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = np.round((hi - depth[finite]) / span * 255.0).astype(np.uint8)
    return out


def encode_depth_png(depth: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(depth_to_gray(depth), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def encode_id_png(id_plane: np.ndarray) -> bytes:
    """16-bit grayscale: stored value is id + 1 so that 0 means no hit."""
    shifted = (id_plane.astype(np.int32) + 1).clip(0, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(shifted).save(buf, format="PNG")
    return buf.getvalue()


def encode_gray_png(plane01: np.ndarray) -> bytes:
    buf = io.BytesIO()
    arr = (np.clip(plane01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()
