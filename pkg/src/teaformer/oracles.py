"""Brute-force reference implementations.

Plain Python loops over scalars, sharing no code with :mod:`teaformer.ops` or
:mod:`teaformer.attention`. They are slow on purpose and exist only to be
compared against. Inputs are numpy arrays (or anything indexable the same
way); outputs are float64 arrays.
"""

from __future__ import annotations

import math

import numpy as np


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def matmul(x, w) -> np.ndarray:
    x, w = _arr(x), _arr(w)
    n, m = x.shape
    m2, p = w.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for t in range(m):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


def softmax(x) -> np.ndarray:
    x = _arr(x)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = [math.exp(v) for v in x[i]]
        total = sum(row)
        out[i] = [v / total for v in row]
    return out


def _padded_pixel(x, r, c, padding):
    h, w = x.shape[:2]
    if 0 <= r < h and 0 <= c < w:
        return x[r, c]
    if padding == "zero":
        return np.zeros(x.shape[2])
    return x[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]


def conv_depthwise(x, kernel, padding="replicate") -> np.ndarray:
    x, kernel = _arr(x), _arr(kernel)
    h, w, ch = x.shape
    k = kernel.shape[0]
    half = k // 2
    out = np.zeros((h, w, ch))
    for r in range(h):
        for c in range(w):
            for ch_i in range(ch):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        acc += _padded_pixel(x, r + a - half, c + b - half, padding)[ch_i] * kernel[a, b, ch_i]
                out[r, c, ch_i] = acc
    return out


def conv_dense(x, kernel, bias=None, padding="replicate") -> np.ndarray:
    x, kernel = _arr(x), _arr(kernel)
    h, w, c_in = x.shape
    k, _, _, c_out = kernel.shape
    half = k // 2
    out = np.zeros((h, w, c_out))
    for r in range(h):
        for c in range(w):
            for o in range(c_out):
                acc = 0.0 if bias is None else float(_arr(bias)[o])
                for a in range(k):
                    for b in range(k):
                        px = _padded_pixel(x, r + a - half, c + b - half, padding)
                        for i in range(c_in):
                            acc += px[i] * kernel[a, b, i, o]
                out[r, c, o] = acc
    return out


def _pool(x, out_h, out_w, reduce) -> np.ndarray:
    x = _arr(x)
    h, w, ch = x.shape
    out = np.zeros((out_h, out_w, ch))
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, ((i + 1) * h) // out_h
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, ((j + 1) * w) // out_w
            for ch_i in range(ch):
                vals = [x[r, c, ch_i] for r in range(r0, r1) for c in range(c0, c1)]
                out[i, j, ch_i] = reduce(vals)
    return out


def avg_pool(x, out_h, out_w) -> np.ndarray:
    return _pool(x, out_h, out_w, lambda v: sum(v) / len(v))


def max_pool(x, out_h, out_w) -> np.ndarray:
    return _pool(x, out_h, out_w, max)


def _round_clamp(v: float, n: int) -> int:
    i = math.floor(v + 0.5) if v >= 0 else -math.floor(-v + 0.5)
    return min(max(i, 0), n - 1)


def gather(x, coords) -> np.ndarray:
    x, coords = _arr(x), _arr(coords)
    h, w, _ = x.shape
    out = np.zeros_like(x)
    for r in range(h):
        for c in range(w):
            out[r, c] = x[_round_clamp(coords[r, c, 0], h), _round_clamp(coords[r, c, 1], w)]
    return out


# -- attention --------------------------------------------------------------


def _dot(a, b) -> float:
    acc = 0.0
    for t in range(len(a)):
        acc += a[t] * b[t]
    return acc


def _weighted(q, keys, values) -> np.ndarray:
    """``sum_j sim(q, k_j) v_j / sum_j sim(q, k_j)`` with ``sim = exp(q.k / sqrt(D))``."""
    d = len(q)
    num = np.zeros(len(values[0]))
    den = 0.0
    for kj, vj in zip(keys, values):
        s = math.exp(_dot(q, kj) / math.sqrt(d))
        num = num + s * np.asarray(vj)
        den += s
    return num / den


def _projections(x, p):
    x = _arr(x)
    flat = x.reshape(-1, x.shape[-1])
    return (
        matmul(flat, p.w_q),
        matmul(flat, p.w_k),
        matmul(flat, p.w_v),
    )


def self_attention(x, p) -> np.ndarray:
    x = _arr(x)
    q, k, v = _projections(x, p)
    out = np.array([_weighted(q[i], k, v) for i in range(len(q))])
    return out.reshape(x.shape)


def window_taps(pos: int, length: int, w: int, s: int) -> list[int]:
    """Per-axis key positions: centred dilated grid, blocked at either border."""
    half = (w - 1) * s // 2
    if pos - half < 0:
        return [s * a for a in range(w)]
    if pos + half > length - 1:
        first = length - 1 - (w - 1) * s
        return [first + s * a for a in range(w)]
    return [pos - half + s * a for a in range(w)]


def _sliding(q, k, v, h, w, spec) -> np.ndarray:
    d = q.shape[1]
    out = np.zeros((h * w, d))
    for r in range(h):
        rows = window_taps(r, h, spec.w, spec.s)
        for c in range(w):
            cols = window_taps(c, w, spec.w, spec.s)
            keys = [rr * w + cc for rr in rows for cc in cols]
            out[r * w + c] = _weighted(q[r * w + c], k[keys], v[keys])
    return out


def skv_sa(x, p, spec) -> np.ndarray:
    x = _arr(x)
    h, w, d = x.shape
    q, k, v = _projections(x, p)
    return _sliding(q, k, v, h, w, spec).reshape(h, w, d)


def offset_coords(kv, kernel, reduce) -> np.ndarray:
    kv = _arr(kv)
    h, w, _ = kv.shape
    feat = conv_depthwise(kv, kernel, "replicate")
    delta = matmul(feat.reshape(h * w, -1), reduce).reshape(h, w, 2)
    coords = np.zeros((h, w, 2))
    for r in range(h):
        for c in range(w):
            coords[r, c, 0] = r + delta[r, c, 0]
            coords[r, c, 1] = c + delta[r, c, 1]
    return coords


def _shuffled(x, p):
    x = _arr(x)
    h, w, d = x.shape
    q, k, v = _projections(x, p)
    k_img, v_img = k.reshape(h, w, d), v.reshape(h, w, d)
    k_shuf = gather(k_img, offset_coords(k_img, p.offset_kernel_k, p.offset_reduce_k))
    v_shuf = gather(v_img, offset_coords(v_img, p.offset_kernel_v, p.offset_reduce_v))
    return q, k_shuf, v_shuf


def askv_sa(x, p, spec) -> np.ndarray:
    x = _arr(x)
    h, w, d = x.shape
    q, k_shuf, v_shuf = _shuffled(x, p)
    return _sliding(q, k_shuf.reshape(-1, d), v_shuf.reshape(-1, d), h, w, spec).reshape(h, w, d)


def dsa(q, k_shuf, v_shuf, spec, pool="avg") -> np.ndarray:
    q, k_shuf, v_shuf = _arr(q), _arr(k_shuf), _arr(v_shuf)
    h, w, d = q.shape
    g = math.isqrt(spec.n_d)
    pool_fn = avg_pool if pool == "avg" else max_pool
    kp = pool_fn(k_shuf, g, g).reshape(-1, d)
    vp = pool_fn(v_shuf, g, g).reshape(-1, d)
    flat_q = q.reshape(-1, d)
    return np.array([_weighted(flat_q[i], kp, vp) for i in range(h * w)]).reshape(h, w, d)


def dsa_op(x, p, spec, pool="avg") -> np.ndarray:
    x = _arr(x)
    q, k, v = _projections(x, p)
    return dsa(q.reshape(x.shape), k.reshape(x.shape), v.reshape(x.shape), spec, pool)


def tea(x, p, spec, pool="avg") -> np.ndarray:
    x = _arr(x)
    h, w, d = x.shape
    q, k_shuf, v_shuf = _shuffled(x, p)
    local = _sliding(q, k_shuf.reshape(-1, d), v_shuf.reshape(-1, d), h, w, spec).reshape(h, w, d)
    glob = dsa(q.reshape(h, w, d), k_shuf, v_shuf, spec, pool)
    a_s = float(_arr(p.alpha_s))
    a_d = float(_arr(p.alpha_d))
    return a_s * local + a_d * glob


def rel_err(actual, expected) -> float:
    """``max |actual - expected| / max |expected|`` (norm-wise, so near-zero entries don't explode)."""
    actual, expected = _arr(actual), _arr(expected)
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    diff = float(np.max(np.abs(actual - expected))) if expected.size else 0.0
    return diff / scale if scale > 0 else diff
