"""Finite-difference checks of every backward pass, packaged for the CLI and tests."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .models import BlockSpec, build_resnet

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-5


def check_conv2d(rng, stride=1, pad=1) -> float:
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    out_shape = T.conv2d(x, w, stride, pad).shape
    r = rng.standard_normal(out_shape)
    dx, dw = T.conv2d_grad(x, w, r, stride, pad)
    f_x = lambda v: float(np.sum(T.conv2d(v, w, stride, pad) * r))
    f_w = lambda v: float(np.sum(T.conv2d(x, v, stride, pad) * r))
    return max(T.grad_check(f_x, x, dx, EPS), T.grad_check(f_w, w, dw, EPS))


def check_batchnorm(rng, train=True) -> float:
    x = rng.standard_normal((4, 2, 5, 5)) * 2 + 0.5
    g = rng.standard_normal(2)
    b = rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    r = rng.standard_normal(x.shape)
    _, _, cache = T.batchnorm(x, g, b, rm, rv, train=train)
    dx, dg, db = T.batchnorm_grad(cache, r)
    f = lambda xx, gg, bb: float(np.sum(T.batchnorm(xx, gg, bb, rm, rv, train=train)[0] * r))
    return max(
        T.grad_check(lambda v: f(v, g, b), x, dx, EPS),
        T.grad_check(lambda v: f(x, v, b), g, dg, EPS),
        T.grad_check(lambda v: f(x, g, v), b, db, EPS),
    )


def check_relu(rng) -> float:
    x = rng.standard_normal((3, 4, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.standard_normal(x.shape)
    return T.grad_check(lambda v: float(np.sum(T.relu(v) * r)), x, T.relu_grad(x, r), EPS)


def check_pools(rng) -> float:
    x = rng.standard_normal((2, 3, 6, 6))
    r1 = rng.standard_normal((2, 3, 3, 3))
    r2 = rng.standard_normal((2, 3))
    e1 = T.grad_check(lambda v: float(np.sum(T.avg_pool2(v) * r1)), x, T.avg_pool2_grad(x.shape, r1), EPS)
    e2 = T.grad_check(
        lambda v: float(np.sum(T.global_avg_pool(v) * r2)), x, T.global_avg_pool_grad(x.shape, r2), EPS
    )
    return max(e1, e2)


def check_affine(rng) -> float:
    x = rng.standard_normal((5, 7))
    w = rng.standard_normal((3, 7))
    b = rng.standard_normal(3)
    r = rng.standard_normal((5, 3))
    dx, dw, db = T.affine_grad(x, w, r)
    f = lambda xx, ww, bb: float(np.sum(T.affine(xx, ww, bb) * r))
    return max(
        T.grad_check(lambda v: f(v, w, b), x, dx, EPS),
        T.grad_check(lambda v: f(x, v, b), w, dw, EPS),
        T.grad_check(lambda v: f(x, w, v), b, db, EPS),
    )


def check_softmax_ce(rng) -> float:
    logits = rng.standard_normal((4, 6))
    labels = rng.integers(0, 6, size=4)
    _, d = T.softmax_cross_entropy(logits, labels)
    return T.grad_check(lambda v: T.softmax_cross_entropy(v, labels)[0], logits, d, EPS)


def _relu_signs(model, x) -> np.ndarray:
    """Sign pattern of every ReLU input for one forward pass."""
    _, cache = model.forward(x)
    parts = []
    for item, c in zip(model.items, cache["caches"]):
        if isinstance(item, BlockSpec):
            branch, _, _, merged = c
            parts.append(branch[2] > 0)  # input of the block's inner ReLU
            parts.append(merged > 0)
        elif item.kind == "relu":
            parts.append(c > 0)
    return np.concatenate([p.ravel() for p in parts])


def check_model(rng, per_tensor: int = 6, seed: int = 0) -> float:
    """Whole n=1 ResNet on 8x8 inputs (train-mode BN), sampling a few entries per tensor.

    Coordinates whose +/-eps perturbation flips any ReLU input across zero are
    skipped and resampled: central differences are not a valid oracle there.
    """
    model = build_resnet(1, (4, 8, 8), input_shape=(3, 8, 8), num_classes=5, seed=seed, dtype=np.float64)
    x = rng.standard_normal((4, 3, 8, 8))
    y = rng.integers(0, 5, size=4)
    logits, cache = model.forward(x)
    _, dl = T.softmax_cross_entropy(logits, y)
    grads = model.backward(cache, dl)

    def loss(_):
        return T.softmax_cross_entropy(model.forward(x)[0], y)[0]

    def smooth_at(p, i) -> bool:
        flat = p.reshape(-1)
        orig = flat[i]
        flat[i] = orig + EPS
        up = _relu_signs(model, x)
        flat[i] = orig - EPS
        down = _relu_signs(model, x)
        flat[i] = orig
        return bool(np.array_equal(up, down))

    worst = 0.0
    for name in sorted(model.params):
        p = model.params[name]
        chosen: list[int] = []
        for i in rng.permutation(p.size):
            if len(chosen) == min(per_tensor, p.size):
                break
            if smooth_at(p, int(i)):
                chosen.append(int(i))
        worst = max(worst, T.grad_check(loss, p, grads[name], EPS, chosen))
    return worst


def run_suite(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {
        "conv2d": max(check_conv2d(rng), check_conv2d(rng, stride=2, pad=1)),
        "batchnorm(train)": check_batchnorm(rng, True),
        "batchnorm(eval)": check_batchnorm(rng, False),
        "relu": check_relu(rng),
        "pool": check_pools(rng),
        "affine": check_affine(rng),
        "softmax_cross_entropy": check_softmax_ce(rng),
        "model(resnet n=1)": check_model(rng, seed=seed),
    }


def tolerance(name: str) -> float:
    return MODEL_TOL if name.startswith("model") else LAYER_TOL
