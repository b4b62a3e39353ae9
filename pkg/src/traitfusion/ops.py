"""Forward/backward kernels for the fusion network.

Every op returns a new Tensor and registers per-parent vector-Jacobian
products on the backward graph. Shapes are validated eagerly and shape
errors always name both offending shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ParamTensor, RngState, ShapeError, Tensor

__all__ = [
    "matmul", "relu", "layernorm", "dropout", "softmax",
    "concat_lastdim", "split_lastdim", "mse_loss",
    "add", "add_bias", "linear", "scale", "scale_rows",
    "reshape", "transpose", "mean_lastdim",
]


def _t(x) -> Tensor:
    if isinstance(x, ParamTensor):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors, or of stacked 3-D tensors with
    identical leading dimension. Backward produces grads for both inputs."""
    a, b = _t(a), _t(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D tensors, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.array @ b.array

    def d_a(g):
        return g @ b.array.swapaxes(-1, -2)

    def d_b(g):
        return a.array.swapaxes(-1, -2) @ g

    return Tensor.from_op(out, (a, b), (d_a, d_b))


def relu(x) -> Tensor:
    """Elementwise max(0, x); backward passes grad where x > 0."""
    x = _t(x)
    mask = x.array > 0
    return Tensor.from_op(np.maximum(0.0, x.array), (x,), (lambda g: g * mask,))


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last dim, then affine gain/bias.

    eps sits inside the denominator sqrt, guarding zero variance.
    """
    x, gain, bias = _t(x), _t(gain), _t(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match last dim of {x.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layernorm eps must be positive, got {eps}")
    mu = x.array.mean(axis=-1, keepdims=True)
    var = x.array.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.array - mu) * inv_std
    out = gain.array * xhat + bias.array

    lead_axes = tuple(range(x.ndim - 1))

    def d_x(g):
        gg = g * gain.array
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (gg - m1 - xhat * m2)

    def d_gain(g):
        return (g * xhat).sum(axis=lead_axes)

    def d_bias(g):
        return g.sum(axis=lead_axes)

    return Tensor.from_op(out, (x, gain, bias), (d_x, d_gain, d_bias))


def dropout(x, p: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout: zero with prob p and scale survivors by 1/(1-p) when
    training; the bitwise identity in eval mode or at p=0."""
    x = _t(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an RngState")
    keep = rng.keep_mask(1.0 - p, x.shape)
    scaled_mask = keep / (1.0 - p)
    return Tensor.from_op(x.array * scaled_mask, (x,), (lambda g: g * scaled_mask,))


def softmax(x) -> Tensor:
    """Last-dim softmax with max-subtraction for overflow safety."""
    x = _t(x)
    shifted = x.array - x.array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def d_x(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return Tensor.from_op(y, (x,), (d_x,))


def concat_lastdim(parts: Sequence) -> Tensor:
    """Concatenate along the last dim; inverse of split_lastdim."""
    parts = [_t(p) for p in parts]
    if not parts:
        raise ShapeError("concat_lastdim needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_lastdim leading dims differ: {parts[0].shape} vs {p.shape}"
            )
    out = np.concatenate([p.array for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        return lambda g: g[..., offsets[i]:offsets[i + 1]]

    return Tensor.from_op(out, parts, tuple(make_vjp(i) for i in range(len(parts))))


def split_lastdim(x, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last dim into pieces of the given sizes; inverse of concat."""
    x = _t(x)
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not partition last dim of {x.shape}")
    offsets = np.cumsum([0] + sizes)
    pieces = []
    for i in range(len(sizes)):
        lo, hi = offsets[i], offsets[i + 1]
        piece_arr = np.ascontiguousarray(x.array[..., lo:hi])

        def make_vjp(lo=lo, hi=hi):
            def vjp(g):
                full = np.zeros(x.shape)
                full[..., lo:hi] = g
                return full
            return vjp

        pieces.append(Tensor.from_op(piece_arr, (x,), (make_vjp(),)))
    return pieces


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences; backward is 2*(pred-target)/B."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.array - target.array
    n = max(pred.size, 1)
    out = np.asarray(np.mean(diff * diff)) if pred.size else np.asarray(0.0)

    def d_pred(g):
        return g * 2.0 * diff / n

    def d_target(g):
        return g * -2.0 * diff / n

    return Tensor.from_op(out, (pred, target), (d_pred, d_target))


def add(a, b) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return Tensor.from_op(a.array + b.array, (a, b), (lambda g: g, lambda g: g))


def add_bias(x, b) -> Tensor:
    """Add a 1-D bias over the last dim of x."""
    x, b = _t(x), _t(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias shape {b.shape} does not match last dim of {x.shape}")
    lead_axes = tuple(range(x.ndim - 1))
    return Tensor.from_op(
        x.array + b.array, (x, b), (lambda g: g, lambda g: g.sum(axis=lead_axes))
    )


def linear(x, weight, bias=None) -> Tensor:
    """x @ W (+ bias). Weight layout is (fan_in, fan_out)."""
    y = matmul(x, weight)
    if bias is None:
        return y
    return add_bias(y, bias)


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant."""
    x = _t(x)
    c = float(c)
    return Tensor.from_op(x.array * c, (x,), (lambda g: g * c,))


def scale_rows(x, s) -> Tensor:
    """Scale each row of x (B x d) by a per-row scalar s (B x 1)."""
    x, s = _t(x), _t(s)
    if x.ndim != 2 or s.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows needs x (B,d) and s (B,1), got {x.shape} and {s.shape}")

    def d_x(g):
        return g * s.array

    def d_s(g):
        return (g * x.array).sum(axis=-1, keepdims=True)

    return Tensor.from_op(x.array * s.array, (x, s), (d_x, d_s))


def reshape(x, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; backward reshapes the gradient back."""
    x = _t(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return Tensor.from_op(
        x.array.reshape(shape), (x,), (lambda g: np.ascontiguousarray(g).reshape(x.shape),)
    )


def transpose(x, axes: Sequence[int]) -> Tensor:
    """Permute axes; backward applies the inverse permutation."""
    x = _t(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {x.shape}")
    inverse = np.argsort(axes)
    return Tensor.from_op(
        x.array.transpose(axes), (x,), (lambda g: g.transpose(inverse),)
    )


def mean_lastdim(x) -> Tensor:
    """Mean over the last dim."""
    x = _t(x)
    n = x.shape[-1]
    return Tensor.from_op(
        x.array.mean(axis=-1), (x,), (lambda g: np.repeat((g / n)[..., None], n, axis=-1),)
    )
