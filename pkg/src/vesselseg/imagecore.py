"""Raster containers and bit-exact image file I/O.

All containers wrap row-major numpy arrays and are treated as immutable
after construction. Supported file formats: binary PGM (P5, maxval 255)
for reading, 8-bit grayscale PNG for reading and writing, RGB PNG for
overlay output.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, data shape (height, width), dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise ValueError("GrayImage wants a 2-d uint8 array")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("empty image")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FloatImage:
    """Real-valued raster used for intermediate arithmetic, dtype float64."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.float64:
            raise ValueError("FloatImage wants a 2-d float64 array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("FloatImage values must be finite")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean raster, True marks foreground (vessel)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.bool_:
            raise ValueError("BinaryMask wants a 2-d bool array")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class MultiChannelImage:
    """Stack of aligned 8-bit planes, data shape (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.uint8:
            raise ValueError("MultiChannelImage wants a 3-d uint8 array")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


def _read_pgm(raw: bytes) -> GrayImage:
    if raw[:2] != b"P5":
        raise ImageFormatError("unsupported format: not a binary P5 PGM")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ImageFormatError("truncated PGM header")
        c = raw[pos:pos + 1]
        if c == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise ImageFormatError("truncated PGM header")
            pos = nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            fields.append(raw[pos:end])
            pos = end
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ImageFormatError("malformed PGM header") from e
    if maxval != 255:
        raise ImageFormatError("unsupported bit depth: PGM maxval must be 255")
    if width < 1 or height < 1:
        raise ImageFormatError("malformed PGM header")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos:pos + width * height]
    if len(payload) != width * height:
        raise ImageFormatError("PGM header/payload length mismatch")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(data.copy())


def _read_png(path: Path) -> GrayImage:
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L"):
            raise ImageFormatError("unsupported bit depth")
        if im.mode != "L":
            raise ImageFormatError(
                f"unsupported format: expected 8-bit grayscale PNG, got mode {im.mode}"
            )
        data = np.asarray(im, dtype=np.uint8)
    return GrayImage(data)


def load_image(path) -> GrayImage:
    """Read a binary PGM (P5, maxval 255) or 8-bit grayscale PNG.

    Pixel values are preserved exactly.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        return _read_pgm(raw)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise ImageFormatError(f"unsupported format: {path}")


def save_image(img, path) -> None:
    """Write a GrayImage, BinaryMask, or (H, W, 3) uint8 RGB array.

    Masks serialize as 0/255 grayscale. Extension picks the container:
    .png, or .pgm (grayscale only).
    """
    path = Path(path)
    if isinstance(img, BinaryMask):
        arr = np.where(img.data, 255, 0).astype(np.uint8)
        mode = "L"
    elif isinstance(img, GrayImage):
        arr = img.data
        mode = "L"
    elif isinstance(img, np.ndarray) and img.ndim == 3 and img.shape[2] == 3:
        arr = np.ascontiguousarray(img, dtype=np.uint8)
        mode = "RGB"
    else:
        raise ValueError("save_image accepts GrayImage, BinaryMask, or RGB array")
    if path.suffix.lower() == ".pgm":
        if mode != "L":
            raise ValueError("PGM output is grayscale only")
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + arr.tobytes())
        return
    Image.fromarray(arr, mode).save(path, format="PNG")


def crop_center(img: GrayImage, fraction: float) -> GrayImage:
    """Centered crop to floor(fraction * dims); fraction 1.0 is the identity.

    Odd remainders place the extra pixel on the bottom/right (offset is
    floor((dim - new_dim) / 2)).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("crop fraction must be in (0, 1]")
    if fraction == 1.0:
        return img
    new_h = int(img.height * fraction)
    new_w = int(img.width * fraction)
    if new_h < 1 or new_w < 1:
        raise ValueError("crop fraction leaves no pixels")
    y0 = (img.height - new_h) // 2
    x0 = (img.width - new_w) // 2
    return GrayImage(img.data[y0:y0 + new_h, x0:x0 + new_w].copy())


def _sample_axis(n_src: int, n_dst: int):
    # half-pixel-center alignment: src = (dst + 0.5) * n_src / n_dst - 0.5
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * n_src / n_dst - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_src - 2) if n_src > 1 else np.zeros_like(i0)
    frac = pos - i0
    return i0, frac


def resize_bilinear(img: GrayImage, new_w: int, new_h: int) -> GrayImage:
    """Bilinear resample with half-pixel-center alignment."""
    if new_w < 1 or new_h < 1:
        raise ValueError("target dimensions must be positive")
    if new_w == img.width and new_h == img.height:
        return img
    src = img.data.astype(np.float64)
    x0, fx = _sample_axis(img.width, new_w)
    y0, fy = _sample_axis(img.height, new_h)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[y0[:, None], x0[None, :]] * (1 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1 - fx) + src[y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    return GrayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def to_mask(img: GrayImage, threshold: int = 128) -> BinaryMask:
    """Binarize a grayscale image; pixels >= threshold become foreground."""
    return BinaryMask(img.data >= threshold)
