"""Stage-3 mask refinement.

Small-component removal cleans false positives; skeleton endpoints are
paired and bridged with short straight patch lines to restore broken
vessel branches. Also provides the white-cluster corruption used to
build training data for learned refiners.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask

# Skeleton is a BinaryMask constrained to 1-px-wide curves (see thin()).
Skeleton = BinaryMask

_SQUARE = np.ones((3, 3), dtype=bool)


@dataclass
class ComponentSet:
    """Label map plus per-component bookkeeping; label 0 is background.

    Labels are contiguous from 1 in row-major order of each component's
    first pixel. bboxes are (min_x, min_y, max_x, max_y), inclusive.
    """

    labels: np.ndarray
    areas: np.ndarray
    bboxes: list

    @property
    def count(self) -> int:
        return len(self.areas)


def connected_components(mask: BinaryMask, connectivity: int = 8) -> ComponentSet:
    """Two-pass union-find labeling with 4- or 8-connectivity."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    data = mask.data
    h, w = data.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    for y in range(h):
        row = data[y]
        for x in range(w):
            if not row[x]:
                continue
            neigh = []
            if x > 0 and row[x - 1]:
                neigh.append(labels[y, x - 1])
            if y > 0:
                above = labels[y - 1]
                if data[y - 1, x]:
                    neigh.append(above[x])
                if connectivity == 8:
                    if x > 0 and data[y - 1, x - 1]:
                        neigh.append(above[x - 1])
                    if x + 1 < w and data[y - 1, x + 1]:
                        neigh.append(above[x + 1])
            if not neigh:
                labels[y, x] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                m = min(neigh)
                labels[y, x] = m
                for n in neigh:
                    union(m, n)

    # resolve unions, then renumber by first row-major appearance
    roots = np.array([find(i) for i in range(next_label)], dtype=np.int64)
    remap = np.zeros(next_label, dtype=np.int64)
    count = 0
    flat = labels.ravel()
    resolved = roots[flat]
    for v in resolved:
        if v and not remap[v]:
            count += 1
            remap[v] = count
    final = remap[resolved].reshape(h, w)

    areas = np.bincount(final.ravel(), minlength=count + 1)[1:]
    bboxes = []
    for lab in range(1, count + 1):
        ys, xs = np.nonzero(final == lab)
        bboxes.append((int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    return ComponentSet(final, areas, bboxes)


def contour_refine(mask: BinaryMask, area_threshold: int) -> BinaryMask:
    """Drop connected components smaller than area_threshold pixels.

    Surviving components are bit-identical to the input; the op is
    idempotent and never adds pixels.
    """
    if area_threshold < 0:
        raise ValueError("area_threshold must be >= 0")
    if area_threshold == 0 or not mask.data.any():
        return mask
    comps = connected_components(mask, 8)
    keep = np.concatenate([[False], comps.areas >= area_threshold])
    return BinaryMask(keep[comps.labels])


def _neighbor_stack(padded: np.ndarray, h: int, w: int):
    """The 8 neighbor planes in clockwise order starting at north."""
    offsets = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    return [padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in offsets]


def _transitions(neigh) -> np.ndarray:
    ring = neigh + [neigh[0]]
    a = np.zeros(neigh[0].shape, dtype=np.int8)
    for cur, nxt in zip(ring[:-1], ring[1:]):
        a += (~cur & nxt)
    return a


def thin(mask: BinaryMask) -> Skeleton:
    """Iterative two-subpass thinning to a one-pixel-wide skeleton.

    Runs until fixpoint, then clears any residual fully-set 2x2 blocks
    with single-pixel deletions that keep the local neighborhood
    connected, so the thinness invariant holds on arbitrary inputs.
    """
    img = mask.data.copy()
    h, w = img.shape

    def survivors(first_pass: bool) -> np.ndarray:
        padded = np.pad(img, 1)
        n = _neighbor_stack(padded, h, w)
        b = sum(x.astype(np.int8) for x in n)
        a = _transitions(n)
        p2, p4, p6, p8 = n[0], n[2], n[4], n[6]
        cond = img & (b >= 2) & (b <= 6) & (a == 1)
        if first_pass:
            cond &= ~(p2 & p4 & p6) & ~(p4 & p6 & p8)
        else:
            cond &= ~(p2 & p4 & p8) & ~(p2 & p6 & p8)
        return cond

    changed = True
    while changed:
        changed = False
        for first in (True, False):
            kill = survivors(first)
            if kill.any():
                img[kill] = False
                changed = True

    # cleanup: break remaining 2x2 blocks without splitting anything
    while True:
        blocks = img[:-1, :-1] & img[:-1, 1:] & img[1:, :-1] & img[1:, 1:]
        if not blocks.any():
            break
        padded = np.pad(img, 1)
        n = _neighbor_stack(padded, h, w)
        a = _transitions(n)
        removed = False
        for y, x in zip(*np.nonzero(blocks)):
            for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
                py, px = y + dy, x + dx
                if img[py, px] and a[py, px] == 1:
                    img[py, px] = False
                    removed = True
                    break
            if removed:
                break  # transition counts are stale now; recompute
        if not removed:
            break  # no safe deletion anywhere; leave the mask as is
    return BinaryMask(img)


def detect_endpoints(skel: Skeleton) -> list[tuple[int, int]]:
    """Skeleton pixels with exactly one 8-connected skeleton neighbor.

    Returned as (x, y) coordinates in row-major order. Isolated pixels
    (zero neighbors) are speck noise, not endpoints.
    """
    data = skel.data
    padded = np.pad(data, 1)
    counts = sum(p.astype(np.int8) for p in _neighbor_stack(padded, *data.shape))
    ys, xs = np.nonzero(data & (counts == 1))
    return [(int(x), int(y)) for y, x in sorted(zip(ys, xs))]


def bresenham(p0: tuple[int, int], p1: tuple[int, int]) -> list[tuple[int, int]]:
    """All pixels of the segment from p0 to p1 inclusive, 8-connected."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    x, y = x0, y0
    while True:
        out.append((x, y))
        if (x, y) == (x1, y1):
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


@dataclass
class PatchLine:
    """A candidate bridge between two skeleton endpoints."""

    p0: tuple[int, int]
    p1: tuple[int, int]
    pixels: list = field(default_factory=list)
    valid: bool = False

    @property
    def length(self) -> int:
        return len(self.pixels)


def propose_connections(endpoints, max_dist: float) -> list[PatchLine]:
    """Pair each endpoint with its nearest other endpoint within max_dist.

    Symmetric duplicates collapse to one line; distance ties pick the
    partner that comes first in row-major order.
    """
    n = len(endpoints)
    if n < 2:
        return []
    pts = np.asarray(endpoints, dtype=np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    pairs = set()
    limit = float(max_dist) ** 2
    for i in range(n):
        j = int(np.argmin(d2[i]))  # argmin takes the lowest index on ties,
        if d2[i, j] <= limit:      # and endpoints arrive in row-major order
            pairs.add((min(i, j), max(i, j)))
    return [PatchLine(endpoints[i], endpoints[j], bresenham(endpoints[i], endpoints[j]))
            for i, j in sorted(pairs)]


def _pixels_to_mask(pixels, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for x, y in pixels:
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            out[y, x] = True
    return out


def _endpoint_exclusion(shape, p0, p1, radius: int = 2) -> np.ndarray:
    excl = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    for x, y in (p0, p1):
        excl |= (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius
    return excl


def validate_connection(mask: BinaryMask, line: PatchLine, tau: int) -> bool:
    """Accept a line only when it bridges mostly-empty space.

    A scan band (the line dilated by one pixel) is compared against the
    existing mask, excluding a 2 px disk around each endpoint so the
    endpoints' own blobs do not pollute the count. Interior pixels are
    the line minus its two endpoints (which by construction lie on the
    skeleton). The line is valid when interior pixels outnumber mask
    pixels in the band by at least tau; a line lying along existing
    foreground is redundant and fails.
    """
    shape = mask.data.shape
    line_px = _pixels_to_mask(line.pixels, shape)
    excl = _endpoint_exclusion(shape, line.p0, line.p1)
    band = ndimage.binary_dilation(line_px, structure=_SQUARE) & ~excl
    interior = max(len(line.pixels) - 2, 0)
    occupied = int((mask.data & band).sum())
    return interior - occupied >= tau


def _draw_wide(pixels, shape) -> np.ndarray:
    # 2 px wide: stamp a 2x2 block at every line pixel
    out = np.zeros(shape, dtype=bool)
    for x, y in pixels:
        y2, x2 = min(y + 2, shape[0]), min(x + 2, shape[1])
        out[max(y, 0):y2, max(x, 0):x2] = True
    return out


def patch_lines(mask: BinaryMask, max_dist: float = 20.0, tau: int = 3) -> BinaryMask:
    """Bridge broken branches: thin, find endpoints, propose nearest-pair
    lines, validate each against the mask, and merge the valid ones
    (drawn 2 px wide). Output is always a superset of the input."""
    skel = thin(mask)
    endpoints = detect_endpoints(skel)
    out = mask.data.copy()
    for line in propose_connections(endpoints, max_dist):
        line.valid = validate_connection(mask, line, tau)
        if line.valid:
            out |= _draw_wide(line.pixels, out.shape)
    return BinaryMask(out)


def corrupt_mask(gt: BinaryMask, seed: int, n_clusters: int,
                 radius_range: tuple[int, int]) -> BinaryMask:
    """Insert small white clusters over the background, as used to
    synthesize false-positive-rich training pairs for a refiner.

    Cluster centers are drawn uniformly over background pixels, radii
    uniformly from radius_range (inclusive). Deterministic per seed.
    """
    lo, hi = radius_range
    if lo > hi or lo < 1:
        raise ValueError("radius_range must be a nonempty range of radii >= 1")
    out = gt.data.copy()
    if n_clusters == 0:
        return BinaryMask(out)
    rng = np.random.Generator(np.random.PCG64(seed))
    bg_y, bg_x = np.nonzero(~gt.data)
    if len(bg_y) == 0:
        raise ValueError("mask has no background to corrupt")
    h, w = out.shape
    yy, xx = np.mgrid[:h, :w]
    for _ in range(n_clusters):
        k = int(rng.integers(len(bg_y)))
        r = int(rng.integers(lo, hi + 1))
        cy, cx = int(bg_y[k]), int(bg_x[k])
        out |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return BinaryMask(out)
