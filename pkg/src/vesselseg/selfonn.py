"""Network numerics: tensors, convolutions, generative-neuron layers.

Tensors at the public interface are float64 numpy arrays shaped
(batch, channels, height, width). Every differentiable op comes with a
hand-derived backward pass; there is no autograd. Convolutions use the
cross-correlation convention (no kernel flip).

A generative-neuron layer replaces each kernel tap's multiply with a
learnable polynomial: tap response = sum_{q=1..Q} w_q * y^q. The
constant term is folded into the per-output-channel bias, so Q = 1
with matching weights reproduces a plain convolution exactly.

Internally, same-padding convolutions run channels-last over the padded
plane flattened to a (rows, channels) matrix: every kernel tap is then
one GEMM against a contiguous row-shifted slice, with no patch
gathering. Reads that would cross a row boundary land in the zero
padding, so the result is exact; only the (discarded) outputs on
padding rows are garbage. Other paddings fall back to an im2col path.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np
from scipy.linalg import blas as _blas


def require_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass
class Conv2DLayer:
    """Plain convolution parameters: weights (out, in, kh, kw), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    padding: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError("conv weights must be (out, in, kh, kw)")
        if self.weights.shape[2] % 2 == 0 or self.weights.shape[3] % 2 == 0:
            raise ValueError("kernel dims must be odd")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias shape mismatch")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")
        require_finite(self.weights, "conv weights")
        require_finite(self.bias, "conv bias")


@dataclass
class SelfOnnConv2D:
    """Generative-neuron convolution: weights (out, in, kh, kw, Q), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    padding: int = 1

    def __post_init__(self):
        if self.weights.ndim != 5 or self.weights.shape[4] < 1:
            raise ValueError("weights must be (out, in, kh, kw, Q) with Q >= 1")
        if self.weights.shape[2] % 2 == 0 or self.weights.shape[3] % 2 == 0:
            raise ValueError("kernel dims must be odd")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias shape mismatch")
        require_finite(self.weights, "layer weights")
        require_finite(self.bias, "layer bias")

    @property
    def q_order(self) -> int:
        return self.weights.shape[4]


@dataclass
class GradientTape:
    """Gradients from one backward call; shapes mirror the parameters."""

    grad_weights: np.ndarray
    grad_bias: np.ndarray
    grad_input: np.ndarray


def init_conv2d(rng: np.random.Generator, in_ch: int, out_ch: int,
                kernel: int = 3, padding: int | None = None) -> Conv2DLayer:
    """Uniform init in [-s, s] with s = sqrt(1 / fan_in), zero bias."""
    if padding is None:
        padding = kernel // 2
    fan_in = in_ch * kernel * kernel
    s = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-s, s, size=(out_ch, in_ch, kernel, kernel))
    return Conv2DLayer(w, np.zeros(out_ch), padding=padding)


def init_selfonn(rng: np.random.Generator, in_ch: int, out_ch: int, q_order: int,
                 kernel: int = 3, padding: int | None = None) -> SelfOnnConv2D:
    """Uniform init in [-s, s] with s = sqrt(1 / (fan_in * Q)).

    The extra 1/Q tempers the higher-power terms at startup.
    """
    if padding is None:
        padding = kernel // 2
    fan_in = in_ch * kernel * kernel
    s = np.sqrt(1.0 / (fan_in * q_order))
    w = rng.uniform(-s, s, size=(out_ch, in_ch, kernel, kernel, q_order))
    return SelfOnnConv2D(w, np.zeros(out_ch), padding=padding)


# ---------------------------------------------------------------------------
# channels-last fast core (same padding only)

def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _pad_nhwc(x: np.ndarray, half: int) -> np.ndarray:
    if half == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * half, w + 2 * half, c))
    out[:, half:half + h, half:half + w, :] = x
    return out


def _tap_matmul_acc(out_flat: np.ndarray, src_flat: np.ndarray, offset: int,
                    w_tap: np.ndarray) -> None:
    """out_flat[r] += src_flat[r + offset] @ w_tap, rows clipped in range.

    Accumulates in-place through dgemm (beta = 1) so no (rows x co)
    temporary is materialized per tap; w_tap must be C-contiguous.
    """
    rows = out_flat.shape[0]
    if offset >= 0:
        dst, src = out_flat[:rows - offset], src_flat[offset:]
    else:
        dst, src = out_flat[-offset:], src_flat[:rows + offset]
    # dst.T, src.T, w_tap.T are all F-contiguous views, so the call
    # writes straight into out_flat
    res = _blas.dgemm(1.0, w_tap.T, src.T, beta=1.0, c=dst.T, overwrite_c=True)
    if not np.shares_memory(res, out_flat):  # layout surprise: keep correct
        dst[:] = res.T


def _conv_taps(flat_src: np.ndarray, wp: int, w_taps: np.ndarray,
               out_flat: np.ndarray) -> None:
    k = w_taps.shape[0]
    half = k // 2
    for dy in range(k):
        for dx in range(k):
            _tap_matmul_acc(out_flat, flat_src, (dy - half) * wp + (dx - half),
                            w_taps[dy, dx])


def _valid(out_pad_flat: np.ndarray, n: int, hp: int, wp: int, half: int) -> np.ndarray:
    grid = out_pad_flat.reshape(n, hp, wp, -1)
    if half == 0:
        return grid
    return np.ascontiguousarray(grid[:, half:hp - half, half:wp - half, :])


def conv_fwd_nhwc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padding convolution on a channels-last batch."""
    k = weights.shape[2]
    half = k // 2
    n, h, w, _ = x.shape
    hp, wp = h + 2 * half, w + 2 * half
    xp = _pad_nhwc(x, half).reshape(n * hp * wp, -1)
    w_taps = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))
    out = np.empty((n * hp * wp, weights.shape[0]))
    out[:] = bias
    _conv_taps(xp, wp, w_taps, out)
    return _valid(out, n, hp, wp, half)


def _embed_grad(grad: np.ndarray, half: int) -> np.ndarray:
    gp = _pad_nhwc(grad, half)
    return gp.reshape(-1, grad.shape[3])


def _tap_weight_grad(flat_src: np.ndarray, gp_flat: np.ndarray, wp: int, k: int):
    """Per-tap (ci, co) gradients; padding rows of gp_flat are zero, so
    out-of-image products vanish."""
    half = k // 2
    rows = gp_flat.shape[0]
    taps = np.empty((k, k, flat_src.shape[1], gp_flat.shape[1]))
    for dy in range(k):
        for dx in range(k):
            o = (dy - half) * wp + (dx - half)
            if o >= 0:
                taps[dy, dx] = flat_src[o:].T @ gp_flat[:rows - o]
            else:
                taps[dy, dx] = flat_src[:rows + o].T @ gp_flat[-o:]
    return taps


def _tap_input_grad(gp_flat: np.ndarray, wp: int, w_taps: np.ndarray,
                    n: int, hp: int, half: int) -> np.ndarray:
    """dL/dx over the valid region: dxp[r] += gp[r - o] @ w_tap.T."""
    k = w_taps.shape[0]
    dxp = np.zeros((gp_flat.shape[0], w_taps.shape[2]))
    for dy in range(k):
        for dx in range(k):
            o = (dy - half) * wp + (dx - half)
            _tap_matmul_acc(dxp, gp_flat, -o, np.ascontiguousarray(w_taps[dy, dx].T))
    return _valid(dxp, n, hp, wp, half)


def conv_bwd_nhwc(x: np.ndarray, weights: np.ndarray, grad: np.ndarray):
    """Returns (dW in spec layout, db, dx channels-last)."""
    k = weights.shape[2]
    half = k // 2
    n, h, w, _ = x.shape
    hp, wp = h + 2 * half, w + 2 * half
    xp = _pad_nhwc(x, half).reshape(n * hp * wp, -1)
    gp = _embed_grad(grad, half)
    w_taps = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))
    dw_taps = _tap_weight_grad(xp, gp, wp, k)
    dw = dw_taps.transpose(3, 2, 0, 1)
    db = grad.sum(axis=(0, 1, 2))
    dx = _tap_input_grad(gp, wp, w_taps, n, hp, half)
    return np.ascontiguousarray(dw), db, dx


def onn_fwd_nhwc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padding generative-neuron convolution, channels-last.

    Powers are taken on the padded plane (zero padding is power
    invariant), then each power runs the plain tap loop with its own
    coefficient slab.
    """
    k = weights.shape[2]
    q_order = weights.shape[4]
    half = k // 2
    n, h, w, _ = x.shape
    hp, wp = h + 2 * half, w + 2 * half
    xp = _pad_nhwc(x, half).reshape(n * hp * wp, -1)
    out = np.empty((n * hp * wp, weights.shape[0]))
    out[:] = bias
    power = xp
    for q in range(1, q_order + 1):
        if q > 1:
            power = power * xp
        w_taps = np.ascontiguousarray(weights[..., q - 1].transpose(2, 3, 1, 0))
        _conv_taps(power, wp, w_taps, out)
    return _valid(out, n, hp, wp, half)


def onn_bwd_nhwc(x: np.ndarray, weights: np.ndarray, grad: np.ndarray):
    """Backward for the polynomial taps.

    dL/dw_q gathers grad against y^q; dL/dy chains the tap derivative
    sum_q q * w_q * y^(q-1) through the transposed convolution.
    """
    k = weights.shape[2]
    q_order = weights.shape[4]
    half = k // 2
    n, h, w, _ = x.shape
    hp, wp = h + 2 * half, w + 2 * half
    xp = _pad_nhwc(x, half).reshape(n * hp * wp, -1)
    gp = _embed_grad(grad, half)
    dw = np.empty_like(weights)
    dx = None
    power = xp
    for q in range(1, q_order + 1):
        if q > 1:
            power = power * xp
        dw_taps = _tap_weight_grad(power, gp, wp, k)
        dw[..., q - 1] = dw_taps.transpose(3, 2, 0, 1)
        w_taps = np.ascontiguousarray(weights[..., q - 1].transpose(2, 3, 1, 0))
        chain = _tap_input_grad(gp, wp, w_taps, n, hp, half)
        if q == 1:
            dx = chain
        else:
            dx += chain * (q * x ** (q - 1))
    db = grad.sum(axis=(0, 1, 2))
    return dw, db, dx


# ---------------------------------------------------------------------------
# generic im2col path for paddings other than k // 2

def _im2col(x: np.ndarray, kh: int, kw: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n = x.shape[0]
    ho = x.shape[2] - kh + 1
    wo = x.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, -1), ho, wo


def _rows_to_maps(rows: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _maps_to_rows(maps: np.ndarray) -> np.ndarray:
    n, c, h, w = maps.shape
    return np.ascontiguousarray(maps.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _is_same_padding(layer) -> bool:
    k = layer.weights.shape[2]
    return layer.weights.shape[3] == k and layer.padding == k // 2


def _check_channels(layer, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != layer.weights.shape[1]:
        raise ValueError(
            f"expected (N, {layer.weights.shape[1]}, H, W) input, got {x.shape}")


def _check_grad_shape(layer, x: np.ndarray, grad_out: np.ndarray, padding: int) -> None:
    kh, kw = layer.weights.shape[2], layer.weights.shape[3]
    expect = (x.shape[0], layer.weights.shape[0],
              x.shape[2] + 2 * padding - kh + 1, x.shape[3] + 2 * padding - kw + 1)
    if grad_out.shape != expect:
        raise ValueError(f"grad_out shape {grad_out.shape}, expected {expect}")


def conv2d_forward(layer: Conv2DLayer, x: np.ndarray) -> np.ndarray:
    _check_channels(layer, x)
    if _is_same_padding(layer):
        return to_nchw(conv_fwd_nhwc(to_nhwc(x), layer.weights, layer.bias))
    out_ch = layer.weights.shape[0]
    cols, ho, wo = _im2col(x, layer.weights.shape[2], layer.weights.shape[3], layer.padding)
    rows = cols @ np.ascontiguousarray(layer.weights.reshape(out_ch, -1).T)
    rows += layer.bias
    return _rows_to_maps(rows, x.shape[0], ho, wo)


def conv2d_backward(layer: Conv2DLayer, x: np.ndarray, grad_out: np.ndarray) -> GradientTape:
    _check_channels(layer, x)
    _check_grad_shape(layer, x, grad_out, layer.padding)
    if _is_same_padding(layer):
        dw, db, dx = conv_bwd_nhwc(to_nhwc(x), layer.weights, to_nhwc(grad_out))
        return GradientTape(dw, db, to_nchw(dx))
    out_ch, in_ch, kh, kw = layer.weights.shape
    cols, _, _ = _im2col(x, kh, kw, layer.padding)
    gout_rows = _maps_to_rows(grad_out)
    dw = (gout_rows.T @ cols).reshape(layer.weights.shape)
    db = grad_out.sum(axis=(0, 2, 3))
    gcols, gh, gw = _im2col(grad_out, kh, kw, kh - 1 - layer.padding)
    w_flip = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx_rows = gcols @ np.ascontiguousarray(w_flip.reshape(in_ch, -1).T)
    dx = _rows_to_maps(dx_rows, x.shape[0], gh, gw)
    return GradientTape(dw, db, dx)


def selfonn_forward(layer: SelfOnnConv2D, x: np.ndarray) -> np.ndarray:
    _check_channels(layer, x)
    if _is_same_padding(layer):
        return to_nchw(onn_fwd_nhwc(to_nhwc(x), layer.weights, layer.bias))
    out_ch = layer.weights.shape[0]
    cols, ho, wo = _im2col(x, layer.weights.shape[2], layer.weights.shape[3], layer.padding)
    out = np.zeros((cols.shape[0], out_ch))
    power = cols
    for q in range(1, layer.q_order + 1):
        if q > 1:
            power = power * cols
        out += power @ np.ascontiguousarray(layer.weights[..., q - 1].reshape(out_ch, -1).T)
    out += layer.bias
    return _rows_to_maps(out, x.shape[0], ho, wo)


def selfonn_backward(layer: SelfOnnConv2D, x: np.ndarray, grad_out: np.ndarray) -> GradientTape:
    _check_channels(layer, x)
    _check_grad_shape(layer, x, grad_out, layer.padding)
    if _is_same_padding(layer):
        dw, db, dx = onn_bwd_nhwc(to_nhwc(x), layer.weights, to_nhwc(grad_out))
        return GradientTape(dw, db, to_nchw(dx))
    out_ch, in_ch, kh, kw, q_order = layer.weights.shape
    cols, _, _ = _im2col(x, kh, kw, layer.padding)
    gout_rows = _maps_to_rows(grad_out)
    dw = np.empty_like(layer.weights)
    gt = gout_rows.T
    power = cols
    dw[..., 0] = (gt @ power).reshape(out_ch, in_ch, kh, kw)
    for q in range(2, q_order + 1):
        power = power * cols
        dw[..., q - 1] = (gt @ power).reshape(out_ch, in_ch, kh, kw)
    db = grad_out.sum(axis=(0, 2, 3))
    gcols, gh, gw = _im2col(grad_out, kh, kw, kh - 1 - layer.padding)
    dx = np.zeros_like(x)
    for q in range(1, q_order + 1):
        w_flip = layer.weights[..., q - 1][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx_rows = gcols @ np.ascontiguousarray(w_flip.reshape(in_ch, -1).T)
        chain = _rows_to_maps(dx_rows, x.shape[0], gh, gw)
        if q == 1:
            dx += chain
        else:
            dx += chain * (q * x ** (q - 1))
    return GradientTape(dw, db, dx)


# ---------------------------------------------------------------------------
# activations and shape ops (public interface is channels-second)

ACTIVATIONS = ("tanh", "relu", "sigmoid")


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return grad_out * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avgpool2 needs even spatial dims")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(grad_out: np.ndarray) -> np.ndarray:
    # each input pixel contributed 1/4 of its block mean
    g = grad_out * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError("spatial/batch mismatch in channel concat")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out: np.ndarray, split: int):
    return grad_out[:, :split].copy(), grad_out[:, split:].copy()


# ---------------------------------------------------------------------------
# checkpoint codec: arrays as little-endian float64 bytes, base64 in JSON

def encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    if doc.get("dtype") != "<f8":
        raise ValueError(f"unsupported array dtype {doc.get('dtype')!r}")
    raw = base64.b64decode(doc["data"])
    arr = np.frombuffer(raw, dtype="<f8").reshape(doc["shape"])
    return arr.astype(np.float64)


def layer_to_doc(layer) -> dict:
    if isinstance(layer, SelfOnnConv2D):
        return {"kind": "selfonn", "padding": layer.padding,
                "q_order": layer.q_order,
                "weights": encode_array(layer.weights),
                "bias": encode_array(layer.bias)}
    if isinstance(layer, Conv2DLayer):
        return {"kind": "conv2d", "padding": layer.padding,
                "weights": encode_array(layer.weights),
                "bias": encode_array(layer.bias)}
    raise TypeError(f"not a parameter layer: {type(layer)!r}")


def layer_from_doc(doc: dict):
    kind = doc.get("kind")
    w = decode_array(doc["weights"])
    b = decode_array(doc["bias"])
    if kind == "selfonn":
        return SelfOnnConv2D(w, b, padding=doc["padding"])
    if kind == "conv2d":
        return Conv2DLayer(w, b, padding=doc["padding"])
    raise ValueError(f"unknown layer kind {kind!r}")
