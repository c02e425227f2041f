"""Stage-1 enhancement for angiogram frames.

Two complementary channels: contrast-limited adaptive histogram
equalization for local contrast, and a mean-centering normalization
restricted to the circular field of view to kill the patch shadow.
The two outputs are concatenated into a 2-channel network input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, GrayImage, MultiChannelImage, crop_center, resize_bilinear

N_BINS = 256

CROSS_3X3 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
SQUARE_3X3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ClaheConfig:
    grid_w: int = 4
    grid_h: int = 4
    clip_factor: float = 8.0

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid dims must be >= 1")
        if self.clip_factor < 1.0:
            raise ValueError("clip_factor must be >= 1")


@dataclass(frozen=True)
class BenGrahamConfig:
    canny_low: float = 30.0
    canny_high: float = 90.0
    closing_radius: int = 5
    crop_fraction: float = 0.9
    gray_offset: int = 128

    def __post_init__(self):
        if not 0 < self.canny_low < self.canny_high:
            raise ValueError("need 0 < canny_low < canny_high")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must be in (0, 1]")


def clip_redistribute(hist: np.ndarray, clip_count: float) -> np.ndarray:
    """Clip histogram bins at clip_count and spread the excess evenly.

    Single pass: out_i = min(h_i, clip) + sum_j max(0, h_j - clip) / 256.
    Total mass is conserved.
    """
    if clip_count <= 0:
        raise ValueError("clip_count must be positive")
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (N_BINS,):
        raise ValueError("histogram must have exactly 256 bins")
    excess = np.maximum(hist - clip_count, 0.0).sum()
    return np.minimum(hist, clip_count) + excess / N_BINS


def _tile_edges(total: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * total) // tiles


def _tile_lut(tile: np.ndarray, clip_factor: float) -> np.ndarray:
    """Equalization lookup table for one tile with normalized clipping.

    The effective clip count is clip_factor * tile_pixels / 256, so the
    factor is resolution independent.
    """
    hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.float64)
    n = float(tile.size)
    clipped = clip_redistribute(hist, clip_factor * n / N_BINS)
    cdf = np.cumsum(clipped)
    return np.floor(255.0 * cdf / n + 0.5).astype(np.float64)


def clahe(img: GrayImage, cfg: ClaheConfig = ClaheConfig()) -> GrayImage:
    """Tile-wise clipped equalization with bilinear blending between tiles.

    The tile partition is non-overlapping; per-tile mappings are blended
    with tile anchors at each tile's (floor-)center pixel, so a pixel
    sitting exactly on an anchor gets that tile's mapping unmixed. Edge
    pixels beyond the outermost anchors clamp to the nearest tile.
    """
    h, w = img.height, img.width
    if h < cfg.grid_h or w < cfg.grid_w:
        raise ValueError("image smaller than tile grid")
    xs = _tile_edges(w, cfg.grid_w)
    ys = _tile_edges(h, cfg.grid_h)
    luts = np.empty((cfg.grid_h, cfg.grid_w, N_BINS))
    for ty in range(cfg.grid_h):
        for tx in range(cfg.grid_w):
            tile = img.data[ys[ty]:ys[ty + 1], xs[tx]:xs[tx + 1]]
            luts[ty, tx] = _tile_lut(tile, cfg.clip_factor)

    ax = (xs[:-1] + (xs[1:] - xs[:-1] - 1) // 2).astype(np.float64)
    ay = (ys[:-1] + (ys[1:] - ys[:-1] - 1) // 2).astype(np.float64)

    def axis_blend(coords, anchors):
        i0 = np.clip(np.searchsorted(anchors, coords, side="right") - 1, 0, len(anchors) - 1)
        i1 = np.minimum(i0 + 1, len(anchors) - 1)
        span = anchors[i1] - anchors[i0]
        t = np.where(span > 0, (coords - anchors[i0]) / np.where(span > 0, span, 1.0), 0.0)
        return i0, i1, np.clip(t, 0.0, 1.0)

    cx0, cx1, tx = axis_blend(np.arange(w, dtype=np.float64), ax)
    cy0, cy1, ty = axis_blend(np.arange(h, dtype=np.float64), ay)

    v = img.data
    r0, r1 = cy0[:, None], cy1[:, None]
    c0, c1 = cx0[None, :], cx1[None, :]
    wy, wx = ty[:, None], tx[None, :]
    out = ((1 - wy) * (1 - wx) * luts[r0, c0, v]
           + (1 - wy) * wx * luts[r0, c1, v]
           + wy * (1 - wx) * luts[r1, c0, v]
           + wy * wx * luts[r1, c1, v])
    return GrayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def _gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _correlate2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct cross-correlation with reflected borders."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel)


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def _smoothed_gradient(img: GrayImage):
    smoothed = _correlate2d(img.data.astype(np.float64), _gaussian_kernel())
    gx = _correlate2d(smoothed, SOBEL_X)
    gy = _correlate2d(smoothed, SOBEL_Y)
    # /4 rescales sobel response so a full 0-255 step lands near 255
    mag = np.hypot(gx, gy) / 4.0
    return mag, gx, gy


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep local maxima along the gradient direction, 4-way quantized.

    Ties are broken asymmetrically (>= toward the negative direction,
    > toward the positive) so a two-pixel plateau keeps exactly one.
    """
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(ang >= 22.5) & (ang < 67.5)] = 1
    bins[(ang >= 67.5) & (ang < 112.5)] = 2
    bins[(ang >= 112.5) & (ang < 157.5)] = 3

    fwd = [shifted(0, 1), shifted(1, 1), shifted(1, 0), shifted(1, -1)]
    bwd = [shifted(0, -1), shifted(-1, -1), shifted(-1, 0), shifted(-1, 1)]
    keep = np.zeros(mag.shape, dtype=bool)
    for b in range(4):
        sel = bins == b
        keep |= sel & (mag >= bwd[b]) & (mag > fwd[b])
    return keep


def canny(img: GrayImage, low: float, high: float) -> BinaryMask:
    """Edge detection: 5x5 Gaussian (sigma 1.4), Sobel gradients,
    non-maximum suppression, then double-threshold hysteresis with
    8-connected growth from strong pixels."""
    if not 0 < low < high:
        raise ValueError("need 0 < low < high")
    mag, gx, gy = _smoothed_gradient(img)
    thin_mag = np.where(_nonmax_suppress(mag, gx, gy), mag, 0.0)
    strong = thin_mag >= high
    weak = thin_mag >= low
    edges = ndimage.binary_propagation(strong, structure=SQUARE_3X3, mask=weak)
    return BinaryMask(edges)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    ax = np.arange(-r, r + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2) <= r * r


def _center_component(mask: np.ndarray) -> np.ndarray:
    """Region reachable from the center pixel by 4-connected steps.

    The flood is 4-connected because the edge ring bounding the field of
    view is an 8-connected curve, and only a 4-connected flood cannot
    slip diagonally through it. The center is force-seeded so the result
    is never empty even when the refined mask excludes it.
    """
    seed = np.zeros_like(mask)
    seed[mask.shape[0] // 2, mask.shape[1] // 2] = True
    return ndimage.binary_propagation(seed, structure=CROSS_3X3, mask=mask | seed)


def field_mask(img: GrayImage, cfg: BenGrahamConfig = BenGrahamConfig()) -> BinaryMask:
    """Circular field-of-view interior mask.

    Edges are detected and inverted, a one-pass open with a 3x3 cross
    removes speck noise, the component around the image center is kept,
    and a closing with a disk element fills pinholes inside it. The
    component selection runs before the closing: closing the whole
    inverted mask first would bridge straight across the thin edge ring
    and leak the interior into the exterior. Selection is repeated after
    the closing so the single-component guarantee survives any merge.
    """
    edges = canny(img, cfg.canny_low, cfg.canny_high)
    inv = ~edges.data
    opened = ndimage.binary_dilation(
        ndimage.binary_erosion(inv, structure=CROSS_3X3, border_value=1),
        structure=CROSS_3X3)
    region = _center_component(opened)
    if cfg.closing_radius > 0:
        disk = _disk(cfg.closing_radius)
        region = ndimage.binary_erosion(
            ndimage.binary_dilation(region, structure=disk),
            structure=disk, border_value=1)
        region = _center_component(region)
    return BinaryMask(region)


def ben_graham(img: GrayImage, mask: BinaryMask, cfg: BenGrahamConfig = BenGrahamConfig()) -> GrayImage:
    """Mean-centering normalization over the field-of-view interior.

    Interior pixels get their masked mean subtracted and are re-centered
    at gray_offset; exterior pixels are flattened to gray_offset. The
    frame is then center-cropped by crop_fraction and resized back so
    all channels stay aligned.
    """
    if mask.data.shape != img.data.shape:
        raise ValueError("mask dims must match image dims")
    if not mask.data.any():
        raise ValueError("empty field mask")
    pixels = img.data.astype(np.float64)
    mu = pixels[mask.data].mean()
    centered = np.where(mask.data, pixels - mu + cfg.gray_offset, float(cfg.gray_offset))
    out = GrayImage(np.clip(np.floor(centered + 0.5), 0, 255).astype(np.uint8))
    if cfg.crop_fraction < 1.0:
        h, w = out.height, out.width
        out = resize_bilinear(crop_center(out, cfg.crop_fraction), w, h)
    return out


def enhance(img: GrayImage, clahe_cfg: ClaheConfig = ClaheConfig(),
            bg_cfg: BenGrahamConfig = BenGrahamConfig()) -> MultiChannelImage:
    """Full stage-1 pipeline: CLAHE channel + field-masked normalization channel."""
    ch0 = clahe(img, clahe_cfg)
    ch1 = ben_graham(img, field_mask(img, bg_cfg), bg_cfg)
    return compose_multichannel(ch0, ch1)


def compose_multichannel(clahe_ch: GrayImage, bg_ch: GrayImage) -> MultiChannelImage:
    """Stack the two enhanced views; plane 0 is CLAHE, plane 1 is the
    normalized channel."""
    if (clahe_ch.height, clahe_ch.width) != (bg_ch.height, bg_ch.width):
        raise ValueError("channel dimension mismatch")
    return MultiChannelImage(np.stack([clahe_ch.data, bg_ch.data]))
