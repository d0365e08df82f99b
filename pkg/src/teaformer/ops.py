"""Differentiable primitives over :class:`~teaformer.tensor.Tensor`.

Images are laid out ``H x W x C`` (row-major); token matrices are ``N x D``.
Ops that perform multiply-accumulates report them to the active
:mod:`~teaformer.counting` counter.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .counting import record, record_aux
from .tensor import Tensor, as_tensor

PAD_MODES = ("zero", "replicate")

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward)


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return Tensor._result(out, (x,), backward)


# -- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return Tensor._result(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return Tensor._result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),)
    )


# -- reductions -----------------------------------------------------------


def sum_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return Tensor._result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def l1_loss(pred: Tensor, target) -> Tensor:
    return mean(abs_(sub(pred, target)))


# -- products -------------------------------------------------------------


def linear_project(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x: N x D_in`` and ``w: D_in x D_out``."""
    x, w = _coerce(x, w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear_project shape mismatch: {x.shape} @ {w.shape}")
    record(x.shape[0] * x.shape[1] * w.shape[1])

    def backward(g):
        return g @ w.data.T, x.data.T @ g

    return Tensor._result(x.data @ w.data, (x, w), backward)


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; one MAC per point of the joint index space."""
    a, b = _coerce(a, b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    sizes: dict[str, int] = {}
    for sub_, arr in ((a_sub, a.data), (b_sub, b.data)):
        if len(sub_) != arr.ndim:
            raise ValueError(f"subscripts {sub_!r} do not match shape {arr.shape}")
        for letter, n in zip(sub_, arr.shape):
            if sizes.setdefault(letter, n) != n:
                raise ValueError(f"size mismatch on index {letter!r}")
    record(math.prod(sizes.values()))

    def backward(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data)
        return ga, gb

    return Tensor._result(np.einsum(subscripts, a.data, b.data), (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    record_aux(x.size, "softmax_exp")

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``x: N x C``; result shape is ``index.shape + (C,)``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    n, c = x.shape

    def backward(g):
        gx = np.zeros((n, c), dtype=g.dtype)
        np.add.at(gx, index.reshape(-1), g.reshape(-1, c))
        return (gx,)

    return Tensor._result(x.data[index], (x,), backward)


# -- spatial --------------------------------------------------------------


def pad2d(x: Tensor, p: int, mode: str = "zero") -> Tensor:
    """Pad both spatial axes of an ``H x W x C`` image by ``p`` pixels."""
    x = as_tensor(x)
    if mode not in PAD_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    if p == 0:
        return x
    h, w = x.shape[:2]
    np_mode = "constant" if mode == "zero" else "edge"
    out = np.pad(x.data, ((p, p), (p, p), (0, 0)), mode=np_mode)

    def backward(g):
        if mode == "zero":
            return (g[p : p + h, p : p + w].copy(),)
        rows = g[p : p + h].copy()
        rows[0] += g[:p].sum(axis=0)
        rows[-1] += g[p + h :].sum(axis=0)
        cols = rows[:, p : p + w].copy()
        cols[:, 0] += rows[:, :p].sum(axis=1)
        cols[:, -1] += rows[:, p + w :].sum(axis=1)
        return (cols,)

    return Tensor._result(out, (x,), backward)


def _check_kernel(kernel: Tensor) -> int:
    k = kernel.shape[0]
    if kernel.shape[1] != k:
        raise ValueError(f"kernel must be square, got {kernel.shape[:2]}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    return k


def conv2d_depthwise(x: Tensor, kernel: Tensor, padding: str = "replicate") -> Tensor:
    """Per-channel correlation of ``x: H x W x C`` with ``kernel: k x k x C``."""
    x, kernel = _coerce(x, kernel)
    k = _check_kernel(kernel)
    h, w, c = x.shape
    if kernel.shape[2] != c:
        raise ValueError(f"kernel has {kernel.shape[2]} channels, input has {c}")
    xp = pad2d(x, k // 2, padding)
    record(h * w * c * k * k)
    src = xp.data
    out = np.zeros((h, w, c), dtype=np.result_type(src, kernel.data))
    for a in range(k):
        for b in range(k):
            out += src[a : a + h, b : b + w] * kernel.data[a, b]

    def backward(g):
        gx = np.zeros_like(src)
        gk = np.zeros_like(kernel.data)
        for a in range(k):
            for b in range(k):
                gx[a : a + h, b : b + w] += g * kernel.data[a, b]
                gk[a, b] = (src[a : a + h, b : b + w] * g).sum(axis=(0, 1))
        return gx, gk

    return Tensor._result(out, (xp, kernel), backward)


def conv2d(x: Tensor, kernel: Tensor, bias=None, padding: str = "replicate") -> Tensor:
    """Dense 2-D correlation: ``kernel: k x k x C_in x C_out``, same spatial size."""
    x, kernel = _coerce(x, kernel)
    k = _check_kernel(kernel)
    h, w, c_in = x.shape
    if kernel.shape[2] != c_in:
        raise ValueError(f"kernel expects {kernel.shape[2]} input channels, got {c_in}")
    c_out = kernel.shape[3]
    xp = pad2d(x, k // 2, padding)
    record(h * w * c_in * c_out * k * k)
    src = xp.data
    out = np.zeros((h, w, c_out), dtype=np.result_type(src, kernel.data))
    for a in range(k):
        for b in range(k):
            out += src[a : a + h, b : b + w] @ kernel.data[a, b]

    def backward(g):
        gx = np.zeros_like(src)
        gk = np.zeros_like(kernel.data)
        flat_g = g.reshape(-1, c_out)
        for a in range(k):
            for b in range(k):
                gx[a : a + h, b : b + w] += g @ kernel.data[a, b].T
                gk[a, b] = src[a : a + h, b : b + w].reshape(-1, c_in).T @ flat_g
        return gx, gk

    out_t = Tensor._result(out, (xp, kernel), backward)
    if bias is not None:
        out_t = add(out_t, bias)
    return out_t


def _cells(n: int, m: int) -> list[tuple[int, int]]:
    return [((i * n) // m, ((i + 1) * n) // m) for i in range(m)]


def _check_pool(x: Tensor, out_h: int, out_w: int) -> None:
    if out_h <= 0 or out_w <= 0:
        raise ValueError("pooling output must be non-empty")
    if out_h > x.shape[0] or out_w > x.shape[1]:
        raise ValueError(f"cannot pool {x.shape[:2]} up to {(out_h, out_w)}")


def avg_pool_adaptive(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over the exact partition ``[floor(i*H/out_h), floor((i+1)*H/out_h))``."""
    x = as_tensor(x)
    _check_pool(x, out_h, out_w)
    rows, cols = _cells(x.shape[0], out_h), _cells(x.shape[1], out_w)
    out = np.empty((out_h, out_w, x.shape[2]), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = x.data[r0:r1, c0:c1].mean(axis=(0, 1))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[r0:r1, c0:c1] = g[i, j] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return Tensor._result(out, (x,), backward)


def max_pool_adaptive(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max over the same partition as :func:`avg_pool_adaptive`; first max wins."""
    x = as_tensor(x)
    _check_pool(x, out_h, out_w)
    rows, cols = _cells(x.shape[0], out_h), _cells(x.shape[1], out_w)
    c = x.shape[2]
    out = np.empty((out_h, out_w, c), dtype=x.dtype)
    winners = {}
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            cell = x.data[r0:r1, c0:c1].reshape(-1, c)
            arg = cell.argmax(axis=0)
            out[i, j] = cell[arg, np.arange(c)]
            winners[i, j] = (r0 + arg // (c1 - c0), c0 + arg % (c1 - c0))

    def backward(g):
        gx = np.zeros_like(x.data)
        for (i, j), (rr, cc) in winners.items():
            gx[rr, cc, np.arange(c)] += g[i, j]
        return (gx,)

    return Tensor._result(out, (x,), backward)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def round_clamp(coords: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-integer (ties away from zero) row/col indices clamped into the image."""
    coords = np.asarray(coords)
    r = np.clip(round_half_away(coords[..., 0]), 0, h - 1).astype(np.intp)
    c = np.clip(round_half_away(coords[..., 1]), 0, w - 1).astype(np.intp)
    return r, c


def gather_hw(x: Tensor, coords) -> Tensor:
    """``out[h, w] = x[round_clamp(coords[h, w])]``.

    Differentiable in ``x`` only; the coordinate path is piecewise constant.
    """
    x = as_tensor(x)
    h, w, c = x.shape
    coord_arr = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    if coord_arr.shape != (h, w, 2):
        raise ValueError(f"coords must be {(h, w, 2)}, got {coord_arr.shape}")
    r, cc = round_clamp(coord_arr, h, w)
    flat = reshape(x, (h * w, c))
    return reshape(take_rows(flat, r * w + cc), (h, w, c))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``H x W x (C r^2) -> (H r) x (W r) x C``; channel ``c*r*r + i*r + j`` lands at ``(h*r+i, w*r+j, c)``."""
    x = as_tensor(x)
    h, w, ch = x.shape
    if ch % (r * r):
        raise ValueError(f"{ch} channels not divisible by r^2={r * r}")
    if r == 1:
        return x
    c = ch // (r * r)
    y = reshape(x, (h, w, c, r, r))
    y = transpose(y, (0, 3, 1, 4, 2))
    return reshape(y, (h * r, w * r, c))
