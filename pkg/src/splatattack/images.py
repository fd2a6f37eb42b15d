"""Image helpers: PNG export/import and the lossless float dump format.

Images are ``(height, width, 3)`` float64 arrays in [0, 1].

Float dump layout: a 16-byte header of four little-endian uint32 values
(width, height, channels, reserved=0) followed by row-major float32 pixel
data. Writing rounds to float32, so dump -> load -> dump is byte-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import CorruptFileError

_HEADER = struct.Struct("<4I")


def to_uint8(image: np.ndarray) -> np.ndarray:
    # Round half up, not numpy's half-to-even.
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    PILImage.fromarray(to_uint8(image), mode="RGB").save(Path(path))


def load_png(path) -> np.ndarray:
    with PILImage.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_float_dump(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    payload = np.ascontiguousarray(image, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(w, h, c, 0) + payload)


def load_float_dump(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: float dump shorter than its header")
    w, h, c, _ = _HEADER.unpack_from(raw)
    need = w * h * c * 4
    if len(raw) - _HEADER.size != need:
        raise CorruptFileError(f"{path}: expected {need} payload bytes, found {len(raw) - _HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return data.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
