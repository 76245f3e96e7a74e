"""Dense numerics for the fixed layer set, with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects in ``[N, C, H, W]`` layout.
Every forward function here has a matching ``*_grad`` function; the pairs
are checked against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

from typing import Callable, Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EmptyBatchError, GeometryError, LabelError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    # trailing rows that do not fill a whole stride are dropped (floor)
    span = size + 2 * pad - k
    if span < 0:
        raise GeometryError(
            f"{axis}: kernel {k} does not fit input extent {size} with pad {pad}"
        )
    return span // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Strided view of shape [N, C, H', W', K, K] over the padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[2] - k) // stride + 1
    wo = (x.shape[3] - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d expects square kernels, got weight {w.shape}")
    if stride < 1 or pad < 0:
        raise GeometryError(f"invalid stride={stride} / pad={pad}")
    k = w.shape[2]
    return (
        _out_extent(x.shape[2], k, stride, pad, "height"),
        _out_extent(x.shape[3], k, stride, pad, "width"),
    )


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` [N,Cin,H,W] with filters ``w`` [Cout,Cin,K,K]."""
    _check_conv(x, w, stride, pad)
    win = _windows(x, w.shape[2], stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', Cout
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int = 1, pad: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dx, dw)`` for :func:`conv2d`."""
    ho, wo = _check_conv(x, w, stride, pad)
    expected = (x.shape[0], w.shape[0], ho, wo)
    if dout.shape != expected:
        raise DimensionError(f"conv2d_grad: dOutput {dout.shape} does not match forward output {expected}")
    k = w.shape[2]
    win = _windows(x, k, stride, pad)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # Cout, Cin, K, K

    dcols = np.tensordot(dout, w, axes=([1], [0]))  # N, H', W', Cin, K, K
    n, c, h, wd = x.shape
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.result_type(x, w))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw


def _check_bn(x: np.ndarray, *per_channel: np.ndarray) -> None:
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects [N,C,H,W], got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyBatchError("batchnorm received an empty batch")
    c = x.shape[1]
    for p in per_channel:
        if p.shape != (c,):
            raise DimensionError(f"batchnorm parameter shape {p.shape} does not match C={c} of input {x.shape}")


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    train: bool = True,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray], tuple]:
    """Per-channel batch normalization.

    Returns ``(out, (new_running_mean, new_running_var), cache)``. Running
    statistics are returned rather than mutated; in eval mode they come back
    unchanged.
    """
    _check_bn(x, gamma, beta, running_mean, running_var)
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    g = gamma[None, :, None, None]
    b = beta[None, :, None, None]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = g * xhat + b
    cache = (xhat, inv_std, gamma, train)
    return out.astype(x.dtype, copy=False), (new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)), cache


def batchnorm_grad(cache: tuple, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dgamma, dbeta)`` for a cached :func:`batchnorm` call."""
    xhat, inv_std, gamma, train = cache
    if dout.shape != xhat.shape:
        raise DimensionError(f"batchnorm_grad: dOutput {dout.shape} vs input {xhat.shape}")
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not train:
        return dout * scale, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = scale * (
        dout
        - dbeta[None, :, None, None] / m
        - xhat * dgamma[None, :, None, None] / m
    )
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_grad(x_shape: tuple[int, ...], dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avg_pool_grad(x_shape: tuple[int, ...], dout: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), x_shape).copy()


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w.T + b`` with ``x`` [N,Din], ``w`` [Dout,Din], ``b`` [Dout]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"affine shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b


def affine_grad(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dw, db)``."""
    if dout.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(f"affine_grad: dOutput {dout.shape} vs expected {(x.shape[0], w.shape[0])}")
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` [N,C] against integer ``labels`` [N].

    Returns the scalar loss and its gradient with respect to the logits.
    """
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)


def sgd_update(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: MutableMapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*value``; ``value <- value - lr*v``.
    Parameters without a gradient entry are left alone.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name in sorted(grads):
        value = params[name]
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * value
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(value)
        v *= momentum
        v += g
        velocity[name] = v
        value -= (lr * v).astype(value.dtype, copy=False)


def grad_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-5,
    indices: np.ndarray | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` is evaluated at perturbed copies of ``x`` (modified in place and
    restored). ``indices`` optionally restricts the check to a subset of flat
    positions.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires 64-bit inputs")
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.reshape(-1)
    ana = np.asarray(analytic).reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        a = ana[i]
        err = abs(num - a) / max(abs(num), abs(a), 1e-8)
        worst = max(worst, err)
    return float(worst)
