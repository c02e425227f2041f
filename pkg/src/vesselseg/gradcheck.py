"""Central finite-difference verification of every backward pass.

Each differentiable op is reduced to a scalar through a fixed random
projection; every parameter and input element is then perturbed by
+/- eps and the quotient compared against the hand-derived gradient.
The assembled network is checked with directional derivatives (random
directions plus the gradient direction) since element-wise probing of
the full parameter vector would be pointlessly slow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import segnet, selfonn

EPS = 1e-5
PER_OP_TOL = 1e-6
NETWORK_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _fd_all(scalar_fn, arrays, analytic, eps=EPS) -> float:
    """Max relative error over every element of every array in `arrays`.

    scalar_fn() re-evaluates the op; analytic[k] is the claimed gradient
    for arrays[k].
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = scalar_fn()
            flat[i] = keep - eps
            down = scalar_fn()
            flat[i] = keep
            worst = max(worst, rel_err((up - down) / (2 * eps), gflat[i]))
    return worst


def check_conv2d(seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed))
    layer = selfonn.init_conv2d(rng, 2, 3)
    layer.weights[:] = rng.uniform(-0.6, 0.6, layer.weights.shape)
    layer.bias[:] = rng.uniform(-0.3, 0.3, layer.bias.shape)
    x = rng.uniform(-1.0, 1.0, (1, 2, 5, 5))
    proj = rng.normal(size=(1, 3, 5, 5))
    tape = selfonn.conv2d_backward(layer, x, proj)
    err = _fd_all(lambda: float((selfonn.conv2d_forward(layer, x) * proj).sum()),
                  [layer.weights, layer.bias, x],
                  [tape.grad_weights, tape.grad_bias, tape.grad_input])
    return CheckResult("conv2d", err, PER_OP_TOL)


def check_selfonn(q_order: int, seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + q_order))
    layer = selfonn.init_selfonn(rng, 2, 2, q_order)
    layer.weights[:] = rng.uniform(-0.5, 0.5, layer.weights.shape)
    layer.bias[:] = rng.uniform(-0.3, 0.3, layer.bias.shape)
    x = rng.uniform(-0.9, 0.9, (1, 2, 6, 6))
    proj = rng.normal(size=(1, 2, 6, 6))
    tape = selfonn.selfonn_backward(layer, x, proj)
    err = _fd_all(lambda: float((selfonn.selfonn_forward(layer, x) * proj).sum()),
                  [layer.weights, layer.bias, x],
                  [tape.grad_weights, tape.grad_bias, tape.grad_input])
    return CheckResult(f"selfonn_q{q_order}", err, PER_OP_TOL)


def check_activation(kind: str, seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + hash(kind) % 1000))
    # keep relu inputs away from its kink
    x = rng.uniform(0.2, 1.5, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4))
    proj = rng.normal(size=x.shape)
    grad = selfonn.activation_backward(kind, x, proj)
    err = _fd_all(lambda: float((selfonn.activation_forward(kind, x) * proj).sum()),
                  [x], [grad])
    return CheckResult(kind, err, PER_OP_TOL)


def check_avgpool(seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + 41))
    x = rng.uniform(-1.0, 1.0, (1, 2, 4, 4))
    proj = rng.normal(size=(1, 2, 2, 2))
    grad = selfonn.avgpool2_backward(proj)
    err = _fd_all(lambda: float((selfonn.avgpool2_forward(x) * proj).sum()), [x], [grad])
    return CheckResult("avgpool2", err, PER_OP_TOL)


def check_upsample(seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + 42))
    x = rng.uniform(-1.0, 1.0, (1, 2, 3, 3))
    proj = rng.normal(size=(1, 2, 6, 6))
    grad = selfonn.upsample2_backward(proj)
    err = _fd_all(lambda: float((selfonn.upsample2_forward(x) * proj).sum()), [x], [grad])
    return CheckResult("upsample2", err, PER_OP_TOL)


def check_concat(seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + 43))
    a = rng.uniform(-1.0, 1.0, (1, 2, 3, 3))
    b = rng.uniform(-1.0, 1.0, (1, 3, 3, 3))
    proj = rng.normal(size=(1, 5, 3, 3))
    ga, gb = selfonn.concat_channels_backward(proj, 2)
    err = _fd_all(lambda: float((selfonn.concat_channels(a, b) * proj).sum()),
                  [a, b], [ga, gb])
    return CheckResult("concat_channels", err, PER_OP_TOL)


def check_loss(name: str, seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64(seed + 77))
    pred = rng.uniform(0.05, 0.95, (2, 1, 6, 6))
    target = (rng.uniform(size=pred.shape) > 0.5).astype(np.float64)
    loss_fn = segnet.LOSSES[name]
    _, grad = loss_fn(pred, target)
    err = _fd_all(lambda: float(loss_fn(pred, target)[0]), [pred], [grad])
    return CheckResult(f"loss_{name}", err, PER_OP_TOL)


def _flatten(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def check_network(seed: int = 0, n_directions: int = 3) -> CheckResult:
    """Directional derivative check through the full default network."""
    rng = np.random.Generator(np.random.PCG64(seed + 99))
    params = segnet.build_network(segnet.NetworkConfig(), seed=seed)
    x = rng.uniform(0.0, 1.0, (1, 2, 8, 8))
    proj = rng.normal(size=(1, 1, 8, 8))

    def scalar() -> float:
        return float((segnet.forward(params, x) * proj).sum())

    cache = segnet._Cache()
    out = segnet.forward(params, x, cache)
    selfonn.require_finite(out, "network output")
    grads = segnet.backward(params, cache, proj)
    g_params = _flatten(segnet._grad_arrays(params, grads))
    arrays = params.arrays()
    eps = 1e-4

    def directional(direction: np.ndarray) -> float:
        direction = direction / np.linalg.norm(direction)
        offset = 0
        views = []
        for arr in arrays:
            views.append(direction[offset:offset + arr.size].reshape(arr.shape))
            offset += arr.size
        for arr, d in zip(arrays, views):
            arr += eps * d
        up = scalar()
        for arr, d in zip(arrays, views):
            arr -= 2 * eps * d
        down = scalar()
        for arr, d in zip(arrays, views):
            arr += eps * d
        return rel_err((up - down) / (2 * eps), float(g_params @ direction))

    worst = directional(g_params.copy())
    for _ in range(n_directions):
        worst = max(worst, directional(rng.normal(size=g_params.size)))

    # input-side gradient along its own direction
    gx = grads["input"]
    d = gx / np.linalg.norm(gx)
    x += eps * d
    up = scalar()
    x -= 2 * eps * d
    down = scalar()
    x += eps * d
    worst = max(worst, rel_err((up - down) / (2 * eps), float((gx * d).sum())))
    return CheckResult("full_network", worst, NETWORK_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    checks = [check_conv2d(seed)]
    for q in (1, 3, 5, 7):
        checks.append(check_selfonn(q, seed))
    for kind in selfonn.ACTIVATIONS:
        checks.append(check_activation(kind, seed))
    checks += [check_avgpool(seed), check_upsample(seed), check_concat(seed)]
    for name in ("bce", "dice", "compound"):
        checks.append(check_loss(name, seed))
    checks.append(check_network(seed))
    return checks
