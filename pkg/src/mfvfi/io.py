"""Weight files and PNG frames.

Weight file layout (all integers little-endian)::

    magic        4 bytes  b"MFVW"
    version      u32      currently 1
    count        u32      number of entries
    entry*count:
        name_len u32
        name     name_len bytes, UTF-8
        rank     u32
        extents  rank x u64
        dtype    u8       0 = float32
        values   prod(extents) x float32
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"MFVW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


class MfvfiError(Exception):
    """Base error carrying a stable, greppable code."""

    code = "E_GENERIC"


class WeightFormatError(MfvfiError):
    code = "E_WEIGHT_FORMAT"


class WeightTruncatedError(WeightFormatError):
    code = "E_WEIGHT_TRUNCATED"


class WeightShapeError(MfvfiError):
    code = "E_WEIGHT_SHAPE"


class FrameSizeError(MfvfiError):
    code = "E_SIZE_MISMATCH"


class FrameReadError(MfvfiError):
    code = "E_READ"


class ConfigError(MfvfiError):
    code = "E_CONFIG"


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so failures leave no partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(getattr(arr, "data", arr))
        if arr.dtype != np.float32:
            raise WeightFormatError(f"parameter {name!r} has dtype {arr.dtype}; only float32 is storable")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(b"\x00")
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightTruncatedError(f"weight file truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise WeightFormatError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    take(4)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in DTYPE_CODES:
            raise WeightFormatError(f"parameter {name!r}: unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        if name in out:
            raise WeightFormatError(f"duplicate parameter {name!r}")
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after {count} entries")
    return out


def save_weights(path, weights: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_weights(weights))


def load_weights(path, config=None) -> "OrderedDict[str, np.ndarray]":
    """Read a weight file; with ``config``, every shape is validated against it."""
    with open(path, "rb") as fh:
        weights = decode_weights(fh.read())
    if config is not None:
        from .model import check_weights
        from .tensor import ShapeError

        try:
            check_weights(config, weights)
        except ShapeError as exc:
            raise WeightShapeError(str(exc)) from None
    return weights


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Decode an image to an 8-bit ``[H, W, 3]`` array."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise FrameReadError(f"cannot read image {path}: {exc}") from None


def encode_png(rgb: np.ndarray) -> bytes:
    import io as _io

    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, rgb: np.ndarray) -> None:
    atomic_write(path, encode_png(rgb))


def to_float(rgb: np.ndarray) -> np.ndarray:
    """``[H, W, 3]`` uint8 -> ``[3, H, W]`` float32 in [0, 1]."""
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` float in [0, 1] -> ``[H, W, 3]`` uint8 (round to nearest)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def read_frame(path) -> np.ndarray:
    return to_float(read_png(path))


def write_frame(path, img: np.ndarray) -> None:
    write_png(path, to_uint8(img))


def reflect_pad_to(img: np.ndarray, divisor: int):
    """Mirror-pad the trailing two axes up to multiples of ``divisor``.

    Returns the padded array and the original ``(H, W)``.
    """
    h, w = img.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if not ph and not pw:
        return img, (h, w)
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(img, pad, mode=mode), (h, w)
