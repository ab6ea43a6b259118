"""Dense float64 tensor math with hand-written backward passes.

Every operation the trainable path needs comes as an explicit fwd/bwd pair
(no autodiff graph): the caller composes backward passes in reverse order
and accumulates into `Tensor.grad`. Training and gradient checks run in
float64; on-disk storage is float32 (see vtns).
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


def ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """NaN/Inf anywhere is a hard error, never silent."""
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


class Tensor:
    """Row-major float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        ensure_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        # grad buffers are never allocated for frozen tensors
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if delta.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {delta.shape} != data shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def tensor_sha256(arr: np.ndarray) -> str:
    """Content hash of an array (dims + float64 payload)."""
    h = hashlib.sha256()
    h.update(np.asarray(arr.shape, dtype="<u8").tobytes())
    h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


# -------------------- matmul --------------------


def matmul_fwd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_bwd(dout, a, b):
    """dA = dC @ B^T, dB = A^T @ dC."""
    return dout @ b.T, a.T @ dout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(matmul_fwd(a.data, b.data))


# -------------------- mean over one axis --------------------


def mean_axis_fwd(x: np.ndarray, axis: int) -> np.ndarray:
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return x.mean(axis=axis)


def mean_axis_bwd(dout: np.ndarray, x_shape: tuple[int, ...], axis: int) -> np.ndarray:
    n = x_shape[axis]
    return np.broadcast_to(np.expand_dims(dout / n, axis), x_shape).copy()


def mean_axis(x: Tensor, axis: int) -> Tensor:
    return Tensor(mean_axis_fwd(x.data, axis))


# -------------------- layer norm --------------------


def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Zero-mean unit-variance over the last axis, then affine. Returns (y, cache)."""
    if x.shape[-1] != gain.shape[0] or gain.shape != bias.shape:
        raise ShapeError(f"layer_norm dims: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    return xhat * gain + bias, (xhat, sigma, gain)


def layer_norm_bwd(dy: np.ndarray, cache):
    """Returns (dx, dgain, dbias)."""
    xhat, sigma, gain = cache
    ghat = dy * gain
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) / sigma
    sum_axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=sum_axes), dy.sum(axis=sum_axes)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    y, _ = layer_norm_fwd(x.data, gain.data, bias.data, eps)
    return Tensor(y)


# -------------------- softmax / gelu --------------------


def softmax_rows_fwd(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (dy - (dy * y).sum(axis=-1, keepdims=True)) * y


def softmax_rows(x: Tensor) -> Tensor:
    return Tensor(softmax_rows_fwd(x.data))


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return dy * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI)


def gelu(x: Tensor) -> Tensor:
    return Tensor(gelu_fwd(x.data))


# -------------------- masked cross entropy --------------------


def cross_entropy_fwd(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean NLL over masked positions; unmasked rows contribute nothing.

    logits (L, V); targets int (L,); mask bool (L,). Returns (loss, cache).
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be rank 2, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ShapeError(
            f"targets {targets.shape} / mask {mask.shape} vs logits {logits.shape}"
        )
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("empty loss mask: no supervised positions")
    picked = targets[mask]
    if picked.min() < 0 or picked.max() >= logits.shape[1]:
        raise ValueError("target index out of vocabulary range")
    ensure_finite(logits, "cross-entropy logits")
    z = logits[mask]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n_masked), picked].mean()
    return float(loss), (mask, picked, np.exp(logp), logits.shape)


def cross_entropy_bwd(cache) -> np.ndarray:
    """Analytic dL/dlogits: (softmax - onehot) / n_masked on masked rows, 0 elsewhere."""
    mask, picked, probs, shape = cache
    dlogits = np.zeros(shape)
    rows = probs.copy()
    rows[np.arange(len(picked)), picked] -= 1.0
    dlogits[mask] = rows / len(picked)
    return dlogits


def cross_entropy(logits: Tensor, targets, mask) -> float:
    loss, _ = cross_entropy_fwd(logits.data, targets, mask)
    return loss


# -------------------- finite-difference gradient check --------------------


def grad_check(
    f: Callable[[], float],
    params: Sequence[Tensor],
    h: float = 1e-5,
    f_loss_only: Callable[[], float] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    `f` must be deterministic: it runs forward+backward, accumulating into
    each param's `.grad`, and returns the scalar loss. `f_loss_only`, when
    given, must compute the same loss without the backward pass; the
    perturbed evaluations use it. Returns the max over all coordinates of
    |a - n| / max(1, |a|, |n|).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    loss_fn = f_loss_only if f_loss_only is not None else f
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise FloatingPointError("non-finite loss in grad_check")
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite loss in grad_check")
            num = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
            if err > max_err:
                max_err = err
    # leave grads at the unperturbed point
    for p in params:
        p.zero_grad()
    f()
    return max_err
