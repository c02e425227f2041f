"""Dataset plumbing, augmentation, phantom synthesis, and overlays.

Phantoms are synthetic angiogram-like frames: dark smooth vessel trees
on a bright circular field with optional stenotic pinches and Gaussian
noise, paired with exact ground-truth masks. They stand in for clinical
data in all desk-scale experiments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, GrayImage, MultiChannelImage, load_image, to_mask
from .preprocess import BenGrahamConfig, ClaheConfig, ben_graham, clahe, field_mask
from .segnet import NetworkConfig, TrainConfig

CONFIG_VERSION = 1

DEFAULT_ROTATIONS = [-90.0, -75.0, -60.0, -45.0, -30.0, -15.0, -10.0, -5.0,
                     5.0, 10.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0]
DEFAULT_TRANSLATIONS = [(-0.10, 0.0), (-0.05, 0.0), (0.05, 0.0), (0.10, 0.0),
                        (0.0, -0.10), (0.0, -0.05), (0.0, 0.05), (0.0, 0.10)]


@dataclass(frozen=True)
class DatasetItem:
    id: str
    image_path: Path
    mask_path: Path | None = None


def list_dataset(images_dir, masks_dir=None) -> list[DatasetItem]:
    """Pair image files with same-named masks; ids are file stems."""
    images_dir = Path(images_dir)
    items = []
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() not in (".png", ".pgm"):
            continue
        mask_path = None
        if masks_dir is not None:
            mask_path = Path(masks_dir) / (p.stem + ".png")
            if not mask_path.exists():
                raise FileNotFoundError(f"no mask for {p.name}")
        items.append(DatasetItem(p.stem, p, mask_path))
    if not items:
        raise FileNotFoundError(f"no images under {images_dir}")
    return items


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: tuple     # item position -> fold index
    seed: int

    def members(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def rest(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f != fold]


def kfold_split(n: int, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle then round-robin: fold sizes differ by at most one,
    every item lands in exactly one fold."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError("more folds than items")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for pos, item in enumerate(order):
        assignment[item] = pos % k
    return FoldSplit(k, tuple(int(f) for f in assignment), seed)


def write_folds_csv(ids: list[str], split: FoldSplit, path) -> None:
    lines = ["id,fold"]
    lines += [f"{i},{f}" for i, f in zip(ids, split.assignment)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_folds_csv(path) -> dict[str, int]:
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != "id,fold":
        raise ValueError("not a fold file")
    out = {}
    for line in lines[1:]:
        name, fold = line.rsplit(",", 1)
        out[name] = int(fold)
    return out


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: tuple = tuple(DEFAULT_ROTATIONS)
    translations: tuple = tuple(DEFAULT_TRANSLATIONS)
    include_original: bool = True

    def __post_init__(self):
        if any(not np.isfinite(a) for a in self.rotation_degrees):
            raise ValueError("angles must be finite")
        for fx, fy in self.translations:
            if not (-1.0 < fx < 1.0 and -1.0 < fy < 1.0):
                raise ValueError("translation fractions must be in (-1, 1)")

    def count(self) -> int:
        return (len(self.rotation_degrees) + len(self.translations)
                + (1 if self.include_original else 0))


def _rotate_plane(plane: np.ndarray, angle: float, nearest: bool, fill: float) -> np.ndarray:
    out = ndimage.rotate(plane.astype(np.float64), angle, reshape=False,
                         order=0 if nearest else 1, mode="constant", cval=fill)
    return out


def _shift_plane(plane: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    out = np.full_like(plane, fill)
    h, w = plane.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = plane[ys_src, xs_src]
    return out


def augment(img: MultiChannelImage, mask: BinaryMask,
            spec: AugmentSpec) -> list[tuple[MultiChannelImage, BinaryMask]]:
    """Rotations about the center and integer-pixel translations.

    Image channels interpolate bilinearly with 50%-gray fill; the mask
    uses nearest-neighbor with background fill; both always receive the
    identical geometric transform. Pixel shifts truncate toward zero
    from the fractional offsets.
    """
    out = []
    if spec.include_original:
        out.append((img, mask))
    for angle in spec.rotation_degrees:
        planes = [np.clip(np.floor(_rotate_plane(p, angle, False, 128.0) + 0.5), 0, 255)
                  for p in img.data]
        m = _rotate_plane(mask.data, angle, True, 0.0) > 0.5
        out.append((MultiChannelImage(np.stack(planes).astype(np.uint8)), BinaryMask(m)))
    for fx, fy in spec.translations:
        dx = int(fx * img.width)
        dy = int(fy * img.height)
        planes = [_shift_plane(p, dx, dy, np.uint8(128)) for p in img.data]
        m = _shift_plane(mask.data, dx, dy, False)
        out.append((MultiChannelImage(np.stack(planes)), BinaryMask(m)))
    return out


# ---------------------------------------------------------------------------
# phantom synthesis

@dataclass(frozen=True)
class PhantomSpec:
    canvas: int = 256
    n_branches: int = 4
    width_range: tuple = (3.0, 7.0)
    stenosis_prob: float = 0.35
    stenosis_pinch: float = 0.4
    noise_sigma: float = 5.0
    vignette: bool = True
    contrast: int = 90
    seed: int = 0

    def __post_init__(self):
        if self.canvas < 16:
            raise ValueError("canvas too small")
        if self.n_branches < 1:
            raise ValueError("need at least one branch")
        if self.width_range[0] < 1 or self.width_range[1] < self.width_range[0]:
            raise ValueError("widths must be >= 1 and ordered")
        for p in (self.stenosis_prob, self.stenosis_pinch):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities/factors must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")


def _quadratic_bezier(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t * t * p2


def sample_branches(spec: PhantomSpec, rng: np.random.Generator):
    """Centerline tree: a trunk plus children sprouting from earlier
    branches. Returns [(points (S, 2) as x,y, widths (S,)), ...]."""
    c = spec.canvas
    margin = 0.08 * c
    wmin, wmax = spec.width_range

    def far_point(origin, min_frac):
        while True:
            p = rng.uniform(margin, c - margin, 2)
            if np.hypot(*(p - origin)) >= min_frac * c:
                return p

    branches = []
    for b in range(spec.n_branches):
        if b == 0:
            p0 = rng.uniform(margin, c - margin, 2)
            p2 = far_point(p0, 0.55)
            w0 = rng.uniform(0.7 * wmax, wmax)
        else:
            parent_pts, parent_ws = branches[rng.integers(len(branches))]
            k = int(rng.integers(int(0.2 * len(parent_pts)), int(0.8 * len(parent_pts))))
            p0 = parent_pts[k].copy()
            p2 = far_point(p0, 0.3)
            w0 = max(wmin, 0.8 * parent_ws[k])
        bend = rng.uniform(-0.25, 0.25) * c
        direction = p2 - p0
        normal = np.array([-direction[1], direction[0]])
        normal /= max(np.hypot(*normal), 1e-9)
        p1 = (p0 + p2) / 2 + bend * normal
        n = max(24, int(2 * np.hypot(*direction)))
        pts = _quadratic_bezier(p0, p1, p2, n)
        w1 = max(wmin, w0 * rng.uniform(0.45, 0.8))
        widths = np.linspace(w0, w1, n)
        if rng.uniform() < spec.stenosis_prob:
            t = np.linspace(0.0, 1.0, n)
            t0 = rng.uniform(0.25, 0.75)
            dip = 1.0 - (1.0 - spec.stenosis_pinch) * np.exp(-((t - t0) ** 2) / (2 * 0.04 ** 2))
            widths = widths * dip
        branches.append((pts, np.maximum(widths, 1.0)))
    return branches


def stroke_branches(canvas: int, branches) -> BinaryMask:
    """Rasterize centerlines as capsule strokes: a pixel is foreground
    when its center lies within half the local width of a segment."""
    mask = np.zeros((canvas, canvas), dtype=bool)
    for pts, widths in branches:
        for i in range(len(pts) - 1):
            a, b = pts[i], pts[i + 1]
            r = (widths[i] + widths[i + 1]) / 4.0
            x0 = max(int(np.floor(min(a[0], b[0]) - r - 1)), 0)
            x1 = min(int(np.ceil(max(a[0], b[0]) + r + 1)) + 1, canvas)
            y0 = max(int(np.floor(min(a[1], b[1]) - r - 1)), 0)
            y1 = min(int(np.ceil(max(a[1], b[1]) + r + 1)) + 1, canvas)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            d = b - a
            len2 = d @ d
            if len2 == 0:
                dist2 = (xx - a[0]) ** 2 + (yy - a[1]) ** 2
            else:
                t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / len2, 0.0, 1.0)
                dist2 = (xx - (a[0] + t * d[0])) ** 2 + (yy - (a[1] + t * d[1])) ** 2
            mask[y0:y1, x0:x1] |= dist2 <= r * r
    return BinaryMask(mask)


def render_phantom(spec: PhantomSpec, branches, rng: np.random.Generator | None = None):
    """Compose the frame: bright field (optionally vignetted to a disk),
    vessels exactly `contrast` levels darker, then additive noise.
    The mask is the noiseless stroked region."""
    c = spec.canvas
    mask = stroke_branches(c, branches)
    base = np.full((c, c), 200.0)
    if spec.vignette:
        yy, xx = np.mgrid[:c, :c]
        r = 0.485 * c
        outside = (xx - (c - 1) / 2) ** 2 + (yy - (c - 1) / 2) ** 2 > r * r
        base[outside] = 70.0
    img = base.copy()
    img[mask.data] -= spec.contrast
    if spec.noise_sigma > 0 and rng is not None:
        img += rng.normal(0.0, spec.noise_sigma, img.shape)
    return GrayImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)), mask


def synth_phantom(spec: PhantomSpec):
    """Deterministic (image, mask) pair for the given spec."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    branches = sample_branches(spec, rng)
    return render_phantom(spec, branches, rng)


# ---------------------------------------------------------------------------
# overlays

TP_COLOR = (0, 255, 0)
FP_COLOR = (0, 255, 255)
FN_COLOR = (255, 0, 0)


def render_overlay(pred: BinaryMask, gt: BinaryMask,
                   base: GrayImage | None = None) -> np.ndarray:
    """RGB error map: true positives green, false positives cyan, false
    negatives red; true negatives show black or the dimmed source."""
    if pred.data.shape != gt.data.shape:
        raise ValueError("mask dimension mismatch")
    h, w = pred.data.shape
    if base is not None:
        if base.data.shape != pred.data.shape:
            raise ValueError("base image dimension mismatch")
        canvas = np.repeat((base.data // 3)[:, :, None], 3, axis=2).astype(np.uint8)
    else:
        canvas = np.zeros((h, w, 3), dtype=np.uint8)
    canvas[pred.data & gt.data] = TP_COLOR
    canvas[pred.data & ~gt.data] = FP_COLOR
    canvas[~pred.data & gt.data] = FN_COLOR
    return canvas


# ---------------------------------------------------------------------------
# run configuration and data loading

CHANNEL_MODES = ("multi", "clahe", "bg", "orig")


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs, serializable to versioned JSON."""

    images_dir: str
    masks_dir: str
    out_dir: str
    preprocessed_dir: str | None = None
    channels: str = "multi"
    fold_file: str | None = None
    test_fold: int = 0
    val_fraction: float = 0.2
    k_folds: int = 5
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    ben_graham: BenGrahamConfig = field(default_factory=BenGrahamConfig)
    augment_spec: AugmentSpec | None = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.channels not in CHANNEL_MODES:
            raise ValueError(f"channels must be one of {CHANNEL_MODES}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    def in_channels(self) -> int:
        return 2 if self.channels == "multi" else 1


def run_config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, indent=2)


def run_config_from_json(text: str) -> RunConfig:
    doc = json.loads(text)
    if doc.get("version") != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {doc.get('version')!r}")
    doc["network"] = NetworkConfig(**doc["network"])
    doc["train"] = TrainConfig(**doc["train"])
    doc["clahe"] = ClaheConfig(**doc["clahe"])
    bg = doc["ben_graham"]
    doc["ben_graham"] = BenGrahamConfig(**bg)
    if doc.get("augment_spec") is not None:
        aug = doc["augment_spec"]
        aug["rotation_degrees"] = tuple(aug["rotation_degrees"])
        aug["translations"] = tuple(tuple(t) for t in aug["translations"])
        doc["augment_spec"] = AugmentSpec(**aug)
    return RunConfig(**doc)


def enhanced_channels(img: GrayImage, clahe_cfg: ClaheConfig,
                      bg_cfg: BenGrahamConfig) -> dict[str, GrayImage]:
    fov = field_mask(img, bg_cfg)
    return {"clahe": clahe(img, clahe_cfg), "bg": ben_graham(img, fov, bg_cfg)}


def load_input_planes(item: DatasetItem, cfg: RunConfig) -> np.ndarray:
    """Channel stack (C, H, W) uint8 for one item per the channel mode.

    Enhanced channels come from the preprocessed directory when present
    and are computed on the fly otherwise.
    """
    if cfg.channels == "orig":
        return load_image(item.image_path).data[None]
    if cfg.preprocessed_dir is not None:
        pre = Path(cfg.preprocessed_dir)
        planes = {name: load_image(pre / f"{item.id}_{name}.png")
                  for name in ("clahe", "bg")}
    else:
        planes = enhanced_channels(load_image(item.image_path), cfg.clahe, cfg.ben_graham)
    if cfg.channels == "multi":
        return np.stack([planes["clahe"].data, planes["bg"].data])
    return planes[cfg.channels].data[None]


def load_pair(item: DatasetItem, cfg: RunConfig):
    """(input (C, H, W) float64 in [0, 1], target (H, W) bool)."""
    x = load_input_planes(item, cfg).astype(np.float64) / 255.0
    y = to_mask(load_image(item.mask_path)).data
    return x, y


def split_items(items: list[DatasetItem], cfg: RunConfig):
    """(train, val, test) item lists for the configured held-out fold."""
    if cfg.fold_file is not None:
        by_id = read_folds_csv(cfg.fold_file)
        assignment = [by_id[item.id] for item in items]
        k = max(assignment) + 1
        split = FoldSplit(k, tuple(assignment), seed=-1)
    else:
        split = kfold_split(len(items), cfg.k_folds, cfg.seed)
    test_idx = split.members(cfg.test_fold)
    rest_idx = split.rest(cfg.test_fold)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    order = rng.permutation(len(rest_idx))
    n_val = max(1, round(cfg.val_fraction * len(rest_idx)))
    val_idx = [rest_idx[i] for i in order[:n_val]]
    train_idx = [rest_idx[i] for i in order[n_val:]]
    return ([items[i] for i in train_idx],
            [items[i] for i in val_idx],
            [items[i] for i in test_idx])


def build_training_arrays(train_items, val_items, cfg: RunConfig):
    """Materialize train/val tensors; augmentation, when configured,
    expands the training list only. Test data never passes through here."""
    val = [load_pair(item, cfg) for item in val_items]
    train = []
    for item in train_items:
        x, y = load_pair(item, cfg)
        if cfg.augment_spec is None:
            train.append((x, y))
            continue
        planes = np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)
        pairs = augment(MultiChannelImage(planes), BinaryMask(y), cfg.augment_spec)
        for aug_img, aug_mask in pairs:
            train.append((aug_img.data.astype(np.float64) / 255.0, aug_mask.data))
    return train, val
