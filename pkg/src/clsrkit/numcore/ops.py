"""Differentiable operations.

Every op returns a new :class:`Tensor`; backward closures return one
gradient per parent (``None`` for parents that need none).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .tensor import Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return Tensor.from_op(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return Tensor.from_op(
        a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power"
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    out = np.logaddexp(a.data, b.data)

    def back(g):
        return (
            unbroadcast(g * np.exp(a.data - out), a.shape),
            unbroadcast(g * np.exp(b.data - out), b.shape),
        )

    return Tensor.from_op(out, (a, b), back, "logaddexp")


# -- activations ----------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """GELU with the exact Gaussian CDF, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return Tensor.from_op(out, (a,), back, "gelu")


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# -- reductions and shape ops ---------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor.from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose"
    )


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(a.data[idx]), (a,), back, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat"
    )


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return Tensor.from_op(out, (a,), lambda g: (np.where(mask, 0, g),), "masked_fill")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    out = np.where(cond, a.data, b.data)

    def back(g):
        return (
            unbroadcast(np.where(cond, g, 0), a.shape),
            unbroadcast(np.where(cond, 0, g), b.shape),
        )

    return Tensor.from_op(out, (a, b), back, "where")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(out, parents, back, "linear")


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero 'same'-padded 1-D convolution.

    ``x`` is (len, c_in) or (batch, len, c_in); ``w`` is (k, c_in, c_out).
    Output length is ceil(len / stride).
    """
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ValueError("conv1d kernel size must be odd")
    if stride not in (1, 2):
        raise ValueError("conv1d stride must be 1 or 2")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.shape[-1]} vs kernel {c_in}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    length = xd.shape[1]
    out_len = -(-length // stride)
    pad = max((out_len - 1) * stride + k - length, 0)
    left = pad // 2
    xp = np.zeros((xd.shape[0], length + pad, c_in), dtype=xd.dtype)
    xp[:, left : left + length] = xd
    span = stride * (out_len - 1) + 1
    out = np.zeros((xd.shape[0], out_len, c_out), dtype=xd.dtype)
    for j in range(k):
        out += xp[:, j : j + span : stride] @ w.data[j]
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[:, j : j + span : stride] += g3 @ w.data[j].T
            window = xp[:, j : j + span : stride].reshape(-1, c_in)
            gw[j] = window.T @ g3.reshape(-1, c_out)
        gx = gxp[:, left : left + length]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g3.reshape(-1, c_out).sum(axis=0)

    return Tensor.from_op(out[0] if squeeze else out, parents, back, "conv1d")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor.from_op(weight.data[ids], (weight,), back, "embedding")


# -- normalisation and softmax --------------------------------------------------


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def back(g):
        gxhat = g * weight.data
        n = x.shape[-1]
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n
        )
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return Tensor.from_op(out, (x, weight, bias), back, "layer_norm")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def log_softmax_tau(logits: Tensor, tau: float = 1.0) -> Tensor:
    """log softmax(logits / tau) along the last axis."""
    _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return Tensor.from_op(out, (logits,), back, "log_softmax")


def softmax_tau(logits: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = logits.data / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)) / tau,)

    return Tensor.from_op(p, (logits,), back, "softmax")


def softmax(logits: Tensor) -> Tensor:
    return softmax_tau(logits, 1.0)


def cross_entropy_ls(
    logits: Tensor, targets: np.ndarray, epsilon: float = 0.0, pad_id: int | None = None
) -> Tensor:
    """Label-smoothed token cross entropy, averaged over non-pad targets.

    The smoothed target puts ``1 - epsilon`` on the gold token and spreads
    ``epsilon`` uniformly over the whole vocabulary (gold included).
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy_ls: every target position is padding")
    safe = np.where(valid, targets, 0)
    if safe.min() < 0 or safe.max() >= vocab:
        raise ValueError("target id outside the vocabulary")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    gold = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    per_pos = -(1.0 - epsilon) * gold - epsilon * logp.mean(axis=-1)
    loss = np.asarray((per_pos * valid).sum() / n, dtype=logits.dtype)

    def back(g):
        target = np.full(logp.shape, epsilon / vocab, dtype=logp.dtype)
        np.put_along_axis(target, safe[..., None], 1.0 - epsilon + epsilon / vocab, axis=-1)
        grad = (np.exp(logp) - target) * (valid[..., None] * (g / n))
        return (grad.astype(logits.dtype, copy=False),)

    return Tensor.from_op(loss, (logits,), back, "cross_entropy_ls")


# -- operator sugar -------------------------------------------------------------


def _bind_operators() -> None:
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(a, b)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: sub(_const(b, a), a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(a, b)
    T.__truediv__ = lambda a, b: div(a, b)
    T.__rtruediv__ = lambda a, b: div(_const(b, a), a)
    T.__neg__ = lambda a: neg(a)
    T.__pow__ = lambda a, p: power(a, p)
    T.__matmul__ = lambda a, b: matmul(a, b)
    T.__getitem__ = lambda a, idx: getitem(a, idx)
    T.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    T.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
    T.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 else (axes or None))
    T.T = property(lambda a: transpose(a))


_bind_operators()
