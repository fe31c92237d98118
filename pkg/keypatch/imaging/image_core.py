"""Image loading, grayscale conversion, bilinear resizing and Gaussian filtering.

Rasters are float64 numpy arrays in [0, 1], indexed [row, col] (and [row, col,
channel] for RGB). Every function here is pure.
"""
from __future__ import annotations

import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from keypatch.errors import ConfigurationError, DecodeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
KERNEL_RADIUS_SIGMAS = 4.0

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PPM_MAGIC = b"P6"


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (height, width)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ConfigurationError(f"GrayImage expects a 2-D array, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RgbImage:
    pixels: np.ndarray  # (height, width, 3)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ConfigurationError(f"RgbImage expects an (H, W, 3) array, got shape {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


# --------- Decoding ----------

def load_image(path: PathLike) -> RgbImage:
    """Decode a PNG or binary PPM (P6) file into an RgbImage with values in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(_PNG_SIGNATURE):
        img = _decode_png(data)
    elif data.startswith(_PPM_MAGIC):
        img = _decode_ppm(data)
    else:
        raise DecodeError(f"{path}: unsupported image format (expected PNG or P6 PPM)", offset=0)
    logger.debug("[IMAGE] loaded %s (%dx%d)", path, img.width, img.height)
    return img


def _check_png_chunks(data: bytes) -> None:
    pos = len(_PNG_SIGNATURE)
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise DecodeError("truncated PNG chunk header", offset=pos)
        length, = struct.unpack(">I", data[pos:pos + 4])
        kind = data[pos + 4:pos + 8]
        end = pos + 12 + length
        if end > len(data):
            raise DecodeError(f"truncated PNG chunk {kind!r}", offset=pos)
        crc, = struct.unpack(">I", data[end - 4:end])
        if zlib.crc32(data[pos + 4:end - 4]) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in PNG chunk {kind!r}", offset=pos)
        pos = end
        if kind == b"IEND":
            seen_end = True
            break
    if not seen_end:
        raise DecodeError("PNG stream ends without IEND chunk", offset=pos)


def _decode_png(data: bytes) -> RgbImage:
    _check_png_chunks(data)
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DecodeError(f"PNG decode failed: {e}", offset=len(_PNG_SIGNATURE)) from e
    return RgbImage(rgb / 255.0)


def _read_ppm_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    # skip whitespace and '#' comments
    while pos < len(data):
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("truncated PPM header", offset=start)
    return data[start:pos], pos


def _decode_ppm(data: bytes) -> RgbImage:
    pos = len(_PPM_MAGIC)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM magic", offset=pos)
    fields = []
    for name in ("width", "height", "maxval"):
        token_start = pos
        token, pos = _read_ppm_token(data, pos)
        if not token.isdigit():
            raise DecodeError(f"invalid PPM {name} {token!r}", offset=token_start)
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"invalid PPM dimensions {width}x{height}", offset=len(_PPM_MAGIC))
    if not 0 < maxval < 256:
        raise DecodeError(f"unsupported PPM maxval {maxval} (8-bit only)", offset=pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM header", offset=pos)
    body = pos + 1
    needed = 3 * width * height
    if len(data) - body < needed:
        raise DecodeError(
            f"truncated PPM body: need {needed} bytes, have {len(data) - body}", offset=len(data)
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=needed, offset=body)
    over = np.flatnonzero(raw > maxval)
    if over.size:
        raise DecodeError(f"PPM sample {int(raw[over[0]])} exceeds maxval {maxval}", offset=body + int(over[0]))
    return RgbImage(raw.reshape(height, width, 3).astype(np.float64) / maxval)


# --------- Encoding ----------

def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pgm(path: PathLike, img: GrayImage) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _to_bytes(img.pixels).tobytes())


def save_ppm(path: PathLike, img: RgbImage) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _to_bytes(img.pixels).tobytes())


def save_png(path: PathLike, img: RgbImage) -> None:
    Image.fromarray(_to_bytes(img.pixels)).save(str(path), format="PNG")


def save_image(path: PathLike, img: RgbImage) -> None:
    if Path(path).suffix.lower() == ".ppm":
        save_ppm(path, img)
    else:
        save_png(path, img)


# --------- Pixel operations ----------

def to_grayscale(img: RgbImage) -> GrayImage:
    """BT.601 luma."""
    return GrayImage(np.clip(img.pixels @ LUMA_WEIGHTS, 0.0, 1.0))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian of radius ceil(4 sigma)."""
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(KERNEL_RADIUS_SIGMAS * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D array with clamp-to-border edges."""
    kernel = gaussian_kernel(sigma)
    out = ndimage.convolve1d(np.asarray(arr, dtype=np.float64), kernel, axis=1, mode="nearest")
    return ndimage.convolve1d(out, kernel, axis=0, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    return GrayImage(blur_array(img.pixels, sigma))


def _axis_samples(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centre alignment
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(src, 0.0, n_in - 1)


def resize_array(arr: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array."""
    if new_w < 1 or new_h < 1:
        raise ConfigurationError(f"target size must be at least 1x1, got {new_w}x{new_h}")
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (new_h, new_w) == (h, w):
        return arr.copy()
    coords = np.stack(np.meshgrid(_axis_samples(h, new_h), _axis_samples(w, new_w), indexing="ij"))
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(arr[..., c], coords, order=1, mode="nearest")
                     for c in range(arr.shape[2])], axis=-1)


def resize_bilinear(img: GrayImage, new_w: int, new_h: int) -> GrayImage:
    return GrayImage(resize_array(img.pixels, new_w, new_h))


def center_crop_square(img: RgbImage) -> RgbImage:
    side = min(img.width, img.height)
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    return RgbImage(img.pixels[top:top + side, left:left + side])


def prepare_model_input(img: RgbImage, size: int) -> RgbImage:
    """Center crop to a square, then resize to size x size for the patch grid."""
    square = center_crop_square(img)
    return RgbImage(np.clip(resize_array(square.pixels, size, size), 0.0, 1.0))


def rotate90(img: GrayImage) -> GrayImage:
    """Exact counter-clockwise quarter turn: (x, y) -> (y, width - 1 - x)."""
    return GrayImage(np.ascontiguousarray(np.rot90(img.pixels)))
