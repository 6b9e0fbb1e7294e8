"""EVF1 volume files, PNG slice overlays and slicing helpers.

EVF1 layout (little-endian)::

    b"EVF1" | u8 ndim (2..5) | ndim x u32 dims | u8 dtype (0 = f32) | raw data, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

__all__ = ["VolumeFileError", "read_evf", "write_evf", "export_overlay_png", "overlay_rgb", "slice_3d"]

MAGIC = b"EVF1"
DTYPES = {0: np.dtype("<f4")}
MAX_BYTES = 1 << 40


class VolumeFileError(ValueError):
    pass


def _encode(data: np.ndarray) -> bytes:
    if not 2 <= data.ndim <= 5:
        raise VolumeFileError(f"EVF supports 2 to 5 dimensions, got {data.ndim}")
    if any(d > 0xFFFFFFFF for d in data.shape):
        raise VolumeFileError(f"dims overflow: {data.shape} does not fit u32")
    header = MAGIC + struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape) + b"\x00"
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def write_evf(volume, path) -> None:
    data = np.asarray(volume.data if isinstance(volume, Tensor) else volume)
    Path(path).write_bytes(_encode(data))


def decode_evf(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise VolumeFileError("truncated header")
    magic = buf[:4]
    if magic != MAGIC:
        if magic[:3] == b"EVF":
            raise VolumeFileError(f"unsupported version {magic!r}")
        raise VolumeFileError(f"bad magic {magic!r}")
    ndim = buf[4]
    if not 2 <= ndim <= 5:
        raise VolumeFileError(f"ndim {ndim} outside 2..5")
    hdr = 5 + 4 * ndim + 1
    if len(buf) < hdr:
        raise VolumeFileError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 5)
    code = buf[hdr - 1]
    if code not in DTYPES:
        raise VolumeFileError(f"unknown dtype code {code}")
    nbytes = DTYPES[code].itemsize * int(np.prod(dims, dtype=object))
    if nbytes > MAX_BYTES:
        raise VolumeFileError(f"dims overflow: {dims} describes {nbytes} bytes")
    payload = len(buf) - hdr
    if payload < nbytes:
        raise VolumeFileError(f"truncated payload: expected {nbytes} bytes, found {payload}")
    if payload > nbytes:
        raise VolumeFileError(f"{payload - nbytes} trailing bytes after payload")
    return np.frombuffer(buf, dtype=DTYPES[code], offset=hdr).reshape(dims).astype(np.float32)


def read_evf(path) -> Tensor:
    return Tensor(decode_evf(Path(path).read_bytes()))


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo)


def overlay_rgb(base, attr, percentile_clip: float = 99.0) -> np.ndarray:
    """uint8 RGB: min-max grayscale base, red blended with alpha 0.6 * clip(|attr| / P, 0, 1)."""
    base = np.asarray(base, dtype=np.float64)
    attr = np.abs(np.asarray(attr, dtype=np.float64))
    if base.ndim != 2 or base.shape != attr.shape:
        raise ValueError(f"base {base.shape} and attribution {attr.shape} must be equal 2D slices")
    if not 0 < percentile_clip <= 100:
        raise ValueError("percentile_clip must be in (0, 100]")
    gray = 255.0 * _minmax(base)
    p = float(np.percentile(attr, percentile_clip))
    alpha = np.zeros(attr.shape) if p == 0 else 0.6 * np.clip(attr / p, 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1) * (1.0 - alpha[..., None])
    rgb[..., 0] += 255.0 * alpha
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def export_overlay_png(base, attr, path, percentile_clip: float = 99.0) -> None:
    Image.fromarray(overlay_rgb(base, attr, percentile_clip), mode="RGB").save(path, format="PNG")


def slice_3d(volume, axis: int, index: int) -> np.ndarray:
    vol = np.asarray(volume.data if isinstance(volume, Tensor) else volume)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    if not 0 <= axis < 3:
        raise IndexError(f"axis {axis} out of range")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} of size {vol.shape[axis]}")
    return np.take(vol, index, axis=axis).copy()
