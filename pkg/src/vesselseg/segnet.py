"""Encoder-decoder segmentation network and its training loop.

The encoder is a small plain-convolution pyramid (two 3x3 conv + relu
per level, average pooling between levels); the decoder mirrors it with
generative-neuron blocks and tanh activations, consuming skip
connections from the encoder; a 1x1 convolution plus sigmoid produces
per-pixel foreground probabilities. All gradients are propagated by
hand through the cached forward graph.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import BinaryMask, FloatImage, MultiChannelImage
from . import selfonn
from .selfonn import (
    Conv2DLayer,
    GradientTape,
    activation_backward,
    activation_forward,
    conv_bwd_nhwc,
    conv_fwd_nhwc,
    init_conv2d,
    init_selfonn,
    onn_bwd_nhwc,
    onn_fwd_nhwc,
    require_finite,
    to_nchw,
    to_nhwc,
)

CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    levels: int = 3
    base_channels: int = 16
    q_order: int = 3
    decoder_activation: str = "tanh"
    encoder_activation: str = "relu"

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.q_order < 1:
            raise ValueError("levels, base_channels, q_order must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.decoder_activation != "tanh":
            raise ValueError("decoder activation is fixed to tanh")
        if self.encoder_activation != "relu":
            raise ValueError("encoder activation is fixed to relu")

    def level_channels(self) -> list[int]:
        return [self.base_channels * (1 << i) for i in range(self.levels)]


@dataclass
class NetworkParams:
    """All parameter layers, keyed by their position in the graph."""

    config: NetworkConfig
    encoder: list          # per level: [convA, convB]
    bottleneck: list       # [convA, convB]
    decoder: list          # deepest level first: [onnA, onnB]
    head: Conv2DLayer

    def layers(self) -> list:
        out = []
        for pair in self.encoder:
            out.extend(pair)
        out.extend(self.bottleneck)
        for pair in self.decoder:
            out.extend(pair)
        out.append(self.head)
        return out

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


def build_network(cfg: NetworkConfig, seed: int) -> NetworkParams:
    """Deterministic construction: same seed, bit-identical parameters."""
    rng = np.random.Generator(np.random.PCG64(seed))
    ch = cfg.level_channels()
    encoder = []
    prev = cfg.in_channels
    for c in ch:
        encoder.append([init_conv2d(rng, prev, c), init_conv2d(rng, c, c)])
        prev = c
    bneck = cfg.base_channels * (1 << cfg.levels)
    bottleneck = [init_conv2d(rng, ch[-1], bneck), init_conv2d(rng, bneck, bneck)]
    decoder = []
    incoming = bneck
    for level in reversed(range(cfg.levels)):
        cin = incoming + ch[level]
        decoder.append([init_selfonn(rng, cin, ch[level], cfg.q_order),
                        init_selfonn(rng, ch[level], ch[level], cfg.q_order)])
        incoming = ch[level]
    head = init_conv2d(rng, ch[0], 1, kernel=1, padding=0)
    return NetworkParams(cfg, encoder, bottleneck, decoder, head)


@dataclass
class _Cache:
    """Intermediate values recorded during forward for the backward pass.

    Everything spatial is held channels-last; backward mirrors that and
    only the graph boundary converts layouts. For tanh/sigmoid the
    activation OUTPUT is recorded (their derivatives come cheaper from
    the output), for relu the input.
    """

    conv_inputs: dict = field(default_factory=dict)
    act_records: list = field(default_factory=list)
    concat_splits: list = field(default_factory=list)
    prob: np.ndarray | None = None


def _act_fwd_cached(kind: str, x: np.ndarray, cache: _Cache | None) -> np.ndarray:
    out = activation_forward(kind, x)
    if cache is not None:
        cache.act_records.append((kind, out if kind in ("tanh", "sigmoid") else x))
    return out


def _act_bwd_cached(record, grad: np.ndarray) -> np.ndarray:
    kind, val = record
    if kind == "tanh":
        return grad * (1.0 - val * val)
    if kind == "sigmoid":
        return grad * val * (1.0 - val)
    return grad * (val > 0.0)


def _pool_fwd(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError("pooling needs even spatial dims")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _pool_bwd(g):
    return np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)


def _up_fwd(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up_bwd(g):
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def forward(params: NetworkParams, batch: np.ndarray, cache: _Cache | None = None) -> np.ndarray:
    """Probability map (N, 1, H, W) for a batch (N, C, H, W).

    H and W must be divisible by 2**levels.
    """
    cfg = params.config
    div = 1 << cfg.levels
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ValueError("batch must be (N, in_channels, H, W)")
    if batch.shape[2] % div or batch.shape[3] % div:
        raise ValueError(f"spatial dims must be divisible by {div}")

    def conv(layer, x, key):
        if cache is not None:
            cache.conv_inputs[key] = x
        return conv_fwd_nhwc(x, layer.weights, layer.bias)

    def onn(layer, x, key):
        if cache is not None:
            cache.conv_inputs[key] = x
        return onn_fwd_nhwc(x, layer.weights, layer.bias)

    def act(kind, x):
        return _act_fwd_cached(kind, x, cache)

    h = to_nhwc(batch)
    skips = []
    for i, (ca, cb) in enumerate(params.encoder):
        h = act(cfg.encoder_activation, conv(ca, h, ("enc", i, 0)))
        h = act(cfg.encoder_activation, conv(cb, h, ("enc", i, 1)))
        skips.append(h)
        h = _pool_fwd(h)
    h = act(cfg.encoder_activation, conv(params.bottleneck[0], h, ("bneck", 0)))
    h = act(cfg.encoder_activation, conv(params.bottleneck[1], h, ("bneck", 1)))
    for j, (oa, ob) in enumerate(params.decoder):
        level = cfg.levels - 1 - j
        h = _up_fwd(h)
        if cache is not None:
            cache.concat_splits.append(h.shape[3])
        h = np.concatenate([h, skips[level]], axis=3)
        h = act(cfg.decoder_activation, onn(oa, h, ("dec", j, 0)))
        h = act(cfg.decoder_activation, onn(ob, h, ("dec", j, 1)))
    logits = conv(params.head, h, ("head",))
    prob = activation_forward("sigmoid", logits)
    if cache is not None:
        cache.prob = prob
    return to_nchw(prob)


def backward(params: NetworkParams, cache: _Cache, grad_prob: np.ndarray) -> dict:
    """Parameter gradients for a forward pass recorded in cache.

    Returns {layer key: GradientTape}; keys match the forward's. The
    entry under "input" is the gradient with respect to the batch.
    """
    cfg = params.config
    acts = list(cache.act_records)
    splits = list(cache.concat_splits)
    grads = {}

    def conv_bwd(layer, key, g):
        dw, db, dx = conv_bwd_nhwc(cache.conv_inputs[key], layer.weights, g)
        grads[key] = GradientTape(dw, db, dx)
        return dx

    def onn_bwd(layer, key, g):
        dw, db, dx = onn_bwd_nhwc(cache.conv_inputs[key], layer.weights, g)
        grads[key] = GradientTape(dw, db, dx)
        return dx

    p = cache.prob
    g = to_nhwc(grad_prob) * p * (1.0 - p)
    g = conv_bwd(params.head, ("head",), g)

    for j in reversed(range(len(params.decoder))):
        oa, ob = params.decoder[j]
        g = _act_bwd_cached(acts.pop(), g)
        g = onn_bwd(ob, ("dec", j, 1), g)
        g = _act_bwd_cached(acts.pop(), g)
        g = onn_bwd(oa, ("dec", j, 0), g)
        split = splits.pop()
        g, g_skip = g[..., :split], g[..., split:]
        g = _up_bwd(g)
        grads[("skip", cfg.levels - 1 - j)] = g_skip

    g = _act_bwd_cached(acts.pop(), g)
    g = conv_bwd(params.bottleneck[1], ("bneck", 1), g)
    g = _act_bwd_cached(acts.pop(), g)
    g = conv_bwd(params.bottleneck[0], ("bneck", 0), g)

    for i in reversed(range(len(params.encoder))):
        ca, cb = params.encoder[i]
        g = _pool_bwd(g)
        g = g + grads.pop(("skip", i))
        g = _act_bwd_cached(acts.pop(), g)
        g = conv_bwd(cb, ("enc", i, 1), g)
        g = _act_bwd_cached(acts.pop(), g)
        g = conv_bwd(ca, ("enc", i, 0), g)
    grads["input"] = to_nchw(g)
    return grads


def layer_keys(params: NetworkParams) -> list:
    keys = []
    for i in range(len(params.encoder)):
        keys += [("enc", i, 0), ("enc", i, 1)]
    keys += [("bneck", 0), ("bneck", 1)]
    for j in range(len(params.decoder)):
        keys += [("dec", j, 0), ("dec", j, 1)]
    keys.append(("head",))
    return keys


def layer_by_key(params: NetworkParams, key):
    if key == ("head",):
        return params.head
    kind, idx = key[0], key[1]
    if kind == "enc":
        return params.encoder[idx][key[2]]
    if kind == "bneck":
        return params.bottleneck[idx]
    if kind == "dec":
        return params.decoder[idx][key[2]]
    raise KeyError(key)


# ---------------------------------------------------------------------------
# losses (scalar value plus gradient with respect to the prediction)

def _check_pair(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")


def loss_bce(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross entropy; predictions clamped away from 0 and 1."""
    _check_pair(pred, target)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = pred.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / n
    grad = -(target / p - (1.0 - target) / (1.0 - p)) / n
    grad = np.where((pred > PROB_CLAMP) & (pred < 1.0 - PROB_CLAMP), grad, 0.0)
    return loss, grad


def loss_dice(pred: np.ndarray, target: np.ndarray):
    """Soft Dice loss over the whole batch: 1 - 2*I / (sum y^2 + sum p^2 + eps)."""
    _check_pair(pred, target)
    inter = (pred * target).sum()
    denom = (target * target).sum() + (pred * pred).sum() + DICE_EPS
    loss = 1.0 - 2.0 * inter / denom
    grad = -2.0 * (target * denom - 2.0 * inter * pred) / (denom * denom)
    return loss, grad


def loss_compound(pred: np.ndarray, target: np.ndarray):
    """Average of BCE and Dice, gradients averaged likewise."""
    lb, gb = loss_bce(pred, target)
    ld, gd = loss_dice(pred, target)
    return 0.5 * (lb + ld), 0.5 * (gb + gd)


LOSSES = {"bce": loss_bce, "dice": loss_dice, "compound": loss_compound}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    max_epochs: int = 200
    lr_drop_factor: float = 0.2
    lr_patience_epochs: int = 5
    early_stop_epochs: int = 20
    loss: str = "dice"
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs,
               self.lr_patience_epochs, self.early_stop_epochs) < 1:
            raise ValueError("counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.lr_drop_factor < 1.0:
            raise ValueError("lr_drop_factor must be in (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")


class AdamState:
    """Per-parameter moment accumulators, beta1 0.9 / beta2 0.999 / eps 1e-8."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: NetworkParams):
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: NetworkParams, grad_arrays: list[np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.BETA1 ** self.t
        c2 = 1.0 - self.BETA2 ** self.t
        for arr, g, m, v in zip(params.arrays(), grad_arrays, self.m, self.v):
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            arr -= lr * (m / c1) / (np.sqrt(v / c2) + self.EPS)


class PlateauScheduler:
    """Reduce-on-plateau plus early stopping, driven one epoch at a time.

    An epoch improves when its validation loss is strictly below the best
    seen so far. After `patience` consecutive non-improving epochs the
    learning rate is multiplied by `factor` (and again every `patience`
    stagnant epochs); after `stop_after` consecutive non-improving epochs
    training halts.
    """

    def __init__(self, lr: float, factor: float, patience: int, stop_after: int):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.stop_after = stop_after
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float):
        """Returns (improved, dropped, stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False, False
        self.bad_epochs += 1
        dropped = self.bad_epochs % self.patience == 0
        if dropped:
            self.lr *= self.factor
        return False, dropped, self.bad_epochs >= self.stop_after


def _grad_arrays(params: NetworkParams, grads: dict) -> list[np.ndarray]:
    out = []
    for key in layer_keys(params):
        tape = grads[key]
        out.append(tape.grad_weights)
        out.append(tape.grad_bias)
    return out


def _stack(dataset, idx):
    xs = np.stack([dataset[i][0] for i in idx])
    ys = np.stack([dataset[i][1] for i in idx])[:, None, :, :]
    return xs, ys.astype(np.float64)


def evaluate_loss(params: NetworkParams, dataset, loss_name: str, batch_size: int) -> float:
    loss_fn = LOSSES[loss_name]
    total, n = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        xs, ys = _stack(dataset, idx)
        loss, _ = loss_fn(forward(params, xs), ys)
        total += loss * len(idx)
        n += len(idx)
    return total / n


def train(params: NetworkParams, train_set, val_set, cfg: TrainConfig):
    """Adam + plateau schedule per the training protocol.

    Returns (best_params, history); history rows are dicts with epoch
    (0-based), train_loss, val_loss, and the lr in effect that epoch.
    Parameters from the best-validation epoch are restored.
    """
    if not len(train_set) or not len(val_set):
        raise ValueError("train and validation sets must be nonempty")
    loss_fn = LOSSES[cfg.loss]
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adam = AdamState(params)
    sched = PlateauScheduler(cfg.learning_rate, cfg.lr_drop_factor,
                             cfg.lr_patience_epochs, cfg.early_stop_epochs)
    best_params = copy.deepcopy(params)
    history = []
    for epoch in range(cfg.max_epochs):
        lr_in_effect = sched.lr
        order = rng.permutation(len(train_set))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs, ys = _stack(train_set, idx)
            cache = _Cache()
            pred = forward(params, xs, cache)
            loss, grad = loss_fn(pred, ys)
            require_finite(np.asarray(loss), "training loss")
            grads = backward(params, cache, grad)
            adam.step(params, _grad_arrays(params, grads), sched.lr)
            total += loss * len(idx)
            n += len(idx)
        val_loss = evaluate_loss(params, val_set, cfg.loss, cfg.batch_size)
        improved, _, stop = sched.update(epoch, val_loss)
        if improved:
            best_params = copy.deepcopy(params)
        history.append({"epoch": epoch, "train_loss": total / n,
                        "val_loss": val_loss, "lr": lr_in_effect})
        if stop:
            break
    return best_params, history


def write_history_csv(history, path) -> None:
    lines = ["epoch,train_loss,val_loss,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']:.10g},"
                     f"{row['val_loss']:.10g},{row['lr']:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# inference

def predict(params: NetworkParams, img: MultiChannelImage) -> FloatImage:
    """Per-pixel foreground probability for one multichannel image.

    Channels are scaled to [0, 1]; spatial dims are reflect-padded up to
    the required multiple and cropped back after the forward pass.
    """
    if img.channels != params.config.in_channels:
        raise ValueError("channel count does not match the network")
    x = img.data.astype(np.float64) / 255.0
    div = 1 << params.config.levels
    h, w = x.shape[1], x.shape[2]
    ph = (-h) % div
    pw = (-w) % div
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    prob = forward(params, x[None])[0, 0, :h, :w]
    return FloatImage(np.ascontiguousarray(prob))


def binarize(prob: FloatImage, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be inside (0, 1)")
    return BinaryMask(prob.data >= threshold)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "network": asdict(params.config),
        "layers": [selfonn.layer_to_doc(l) for l in params.layers()],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg = NetworkConfig(**doc["network"])
    layers = [selfonn.layer_from_doc(d) for d in doc["layers"]]
    skeleton = build_network(cfg, seed=0)
    expect = skeleton.layers()
    if len(layers) != len(expect):
        raise ValueError("checkpoint layer count mismatch")
    for got, want in zip(layers, expect):
        if got.weights.shape != want.weights.shape:
            raise ValueError("checkpoint layer shape mismatch")
    it = iter(layers)
    encoder = [[next(it), next(it)] for _ in range(cfg.levels)]
    bottleneck = [next(it), next(it)]
    decoder = [[next(it), next(it)] for _ in range(cfg.levels)]
    head = next(it)
    return NetworkParams(cfg, encoder, bottleneck, decoder, head), doc["extra"]
