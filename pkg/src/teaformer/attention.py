"""Position-free attention operators over ``H x W x D`` feature maps.

All of them share one kernel, :func:`_attend`: each query row attends over a
per-query table of key/value rows with ``exp(q.k / sqrt(D))`` similarity.
They differ only in which rows the table holds:

* :func:`self_attention` - every token.
* :func:`skv_sa` - a dilated ``w x w`` window centred on the query, re-anchored
  inside the image near the borders.
* :func:`askv_sa` - the same window, read from keys/values that were first
  relocated through a conv-generated coordinate field.
* :func:`dsa` - ``n_d`` average-pooled global tokens.
* :func:`window_attention` - fixed non-overlapping blocks (the non-equivariant
  baseline).

:func:`tea` sums the adaptive sliding branch and the pooled global branch
with two learnable scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import ops
from .counting import mac_scope
from .tensor import Tensor, as_tensor

Probe = Callable[[np.ndarray], None]

POOLS = {"avg": ops.avg_pool_adaptive, "max": ops.max_pool_adaptive}


class SpecViolation(ValueError):
    """An input is too small for the sliding window it is paired with."""


@dataclass(frozen=True)
class SlideSpec:
    """Window size ``w``, stride ``s``, offset-conv kernel ``k``, pooled token count ``n_d``."""

    w: int = 15
    s: int = 4
    k: int = 3
    n_d: int = 16

    def __post_init__(self):
        for name in ("w", "s", "k", "n_d"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.w % 2 == 0:
            raise ValueError(f"window size w must be odd, got {self.w}")
        if self.k % 2 == 0:
            raise ValueError(f"kernel size k must be odd, got {self.k}")
        if math.isqrt(self.n_d) ** 2 != self.n_d:
            raise ValueError(f"n_d must be a perfect square, got {self.n_d}")

    @property
    def grid(self) -> int:
        """Side of the pooled token grid (``sqrt(n_d)``)."""
        return math.isqrt(self.n_d)

    @property
    def reach(self) -> int:
        """Distance from the query to the outermost centred tap, ``(w-1)*s/2``."""
        return (self.w - 1) * self.s // 2

    def check(self, h: int, w: int) -> None:
        if self.w * self.s > min(h, w):
            raise SpecViolation(
                f"w*s = {self.w * self.s} exceeds min(H, W) = {min(h, w)}; "
                f"need an image of at least {self.w * self.s}x{self.w * self.s}"
            )

    @classmethod
    def parse(cls, text: str) -> "SlideSpec":
        parts = [int(p) for p in text.replace("(", "").replace(")", "").split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected w,s,k,nd - got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.w},{self.s},{self.k},{self.n_d}"


@dataclass
class AttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    offset_kernel_k: Tensor  # k x k x D depthwise
    offset_kernel_v: Tensor
    offset_reduce_k: Tensor  # D x 2
    offset_reduce_v: Tensor
    alpha_s: Tensor
    alpha_d: Tensor

    @classmethod
    def init(
        cls,
        dim: int,
        spec: SlideSpec,
        rng: np.random.Generator,
        offset_scale: float = 1.0,
        dtype=np.float64,
    ) -> "AttnParams":
        """Gaussian projections with std ``1/sqrt(D)``; offsets of roughly ``offset_scale`` pixels."""
        std = 1.0 / math.sqrt(dim)

        def draw(*shape, scale=std):
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)

        return cls(
            w_q=draw(dim, dim),
            w_k=draw(dim, dim),
            w_v=draw(dim, dim),
            offset_kernel_k=draw(spec.k, spec.k, dim, scale=offset_scale / spec.k),
            offset_kernel_v=draw(spec.k, spec.k, dim, scale=offset_scale / spec.k),
            offset_reduce_k=draw(dim, 2),
            offset_reduce_v=draw(dim, 2),
            alpha_s=Tensor(1.0, requires_grad=True, dtype=dtype),
            alpha_d=Tensor(1.0, requires_grad=True, dtype=dtype),
        )

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_zero_offsets(self) -> "AttnParams":
        zero = lambda t: Tensor(np.zeros_like(t.data), requires_grad=t.requires_grad)  # noqa: E731
        return replace(
            self,
            offset_kernel_k=zero(self.offset_kernel_k),
            offset_kernel_v=zero(self.offset_kernel_v),
        )

    def with_alphas(self, alpha_s: float, alpha_d: float) -> "AttnParams":
        return replace(
            self,
            alpha_s=Tensor(alpha_s, requires_grad=True),
            alpha_d=Tensor(alpha_d, requires_grad=True),
        )


# -- window indexing ------------------------------------------------------


@dataclass(frozen=True)
class WindowIndex:
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    row_blocked: Optional[str]  # None, "low" or "high"
    col_blocked: Optional[str]

    @property
    def coords(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]


def _axis_start(pos, length: int, spec: SlideSpec):
    """First tap of the dilated grid, re-anchored to stay inside ``[0, length)``."""
    span = (spec.w - 1) * spec.s
    return np.clip(pos - spec.reach, 0, length - 1 - span)


def _blocked(pos: int, length: int, spec: SlideSpec) -> Optional[str]:
    if pos - spec.reach < 0:
        return "low"
    if pos + spec.reach > length - 1:
        return "high"
    return None


def build_window_index(h: int, w: int, height: int, width: int, spec: SlideSpec) -> WindowIndex:
    """Key coordinates for the query at ``(h, w)``."""
    if not (0 <= h < height and 0 <= w < width):
        raise IndexError(f"query {(h, w)} outside {height}x{width}")
    spec.check(height, width)
    taps = spec.s * np.arange(spec.w)
    rows = int(_axis_start(h, height, spec)) + taps
    cols = int(_axis_start(w, width, spec)) + taps
    return WindowIndex(
        rows=tuple(int(r) for r in rows),
        cols=tuple(int(c) for c in cols),
        row_blocked=_blocked(h, height, spec),
        col_blocked=_blocked(w, width, spec),
    )


@lru_cache(maxsize=64)
def window_table(height: int, width: int, w: int, s: int) -> np.ndarray:
    """``(H*W) x w^2`` table of flat key indices, one row per query (row-major)."""
    spec = SlideSpec(w=w, s=s, k=1, n_d=1)
    spec.check(height, width)
    taps = s * np.arange(w)
    rows = _axis_start(np.arange(height), height, spec)[:, None] + taps  # H x w
    cols = _axis_start(np.arange(width), width, spec)[:, None] + taps  # W x w
    flat = rows[:, None, :, None] * width + cols[None, :, None, :]
    table = flat.reshape(height * width, w * w).astype(np.intp)
    table.flags.writeable = False
    return table


@lru_cache(maxsize=64)
def block_table(height: int, width: int, window: int) -> np.ndarray:
    """Key table for non-overlapping ``window x window`` blocks."""
    if height % window or width % window:
        raise SpecViolation(f"{height}x{width} is not divisible into {window}x{window} windows")
    r = np.arange(height) // window * window
    c = np.arange(width) // window * window
    taps = np.arange(window)
    rows = r[:, None] + taps
    cols = c[:, None] + taps
    flat = rows[:, None, :, None] * width + cols[None, :, None, :]
    table = flat.reshape(height * width, window * window).astype(np.intp)
    table.flags.writeable = False
    return table


# -- shared kernel ----------------------------------------------------------


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    table: Optional[np.ndarray],
    probe=None,
    scopes: tuple[str, str] = ("attn_map", "reweight"),
) -> Tensor:
    """``q: N x D`` against ``k, v: M x D``; ``table`` restricts each query to some rows."""
    d = q.shape[1]
    score_scope, reweight_scope = scopes
    scale = 1.0 / math.sqrt(d)
    if table is None:
        with mac_scope(score_scope):
            scores = ops.einsum2("nd,md->nm", q, k)
        weights = ops.softmax_rows(ops.mul(scores, scale))
        if probe is not None:
            probe(weights.data)
        with mac_scope(reweight_scope):
            return ops.einsum2("nm,md->nd", weights, v)
    k_rows = ops.take_rows(k, table)
    v_rows = ops.take_rows(v, table)
    with mac_scope(score_scope):
        scores = ops.einsum2("nd,njd->nj", q, k_rows)
    weights = ops.softmax_rows(ops.mul(scores, scale))
    if probe is not None:
        probe(weights.data)
    with mac_scope(reweight_scope):
        return ops.einsum2("nj,njd->nd", weights, v_rows)


def _flat(x: Tensor) -> Tensor:
    h, w, d = x.shape
    return ops.reshape(x, (h * w, d))


def project_qkv(x: Tensor, p: AttnParams) -> tuple[Tensor, Tensor, Tensor]:
    """Token-wise ``x W_q, x W_k, x W_v`` on ``N x D`` input."""
    with mac_scope("qkv_proj"):
        return (
            ops.linear_project(x, p.w_q),
            ops.linear_project(x, p.w_k),
            ops.linear_project(x, p.w_v),
        )


def _image(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"expected an H x W x D feature map, got shape {x.shape}")
    return x


# -- operators --------------------------------------------------------------


def self_attention(x, p: AttnParams, probe: Optional[Probe] = None) -> Tensor:
    """Global attention over all tokens; accepts ``N x D`` or ``H x W x D``."""
    x = as_tensor(x)
    shape = x.shape
    tokens = _flat(x) if x.ndim == 3 else x
    if tokens.shape[0] == 0:
        raise ValueError("self_attention needs at least one token")
    q, k, v = project_qkv(tokens, p)
    out = _attend(q, k, v, None, probe)
    return ops.reshape(out, shape) if x.ndim == 3 else out


def skv_sa(x, p: AttnParams, spec: SlideSpec, probe: Optional[Probe] = None) -> Tensor:
    x = _image(x)
    h, w, d = x.shape
    spec.check(h, w)
    q, k, v = project_qkv(_flat(x), p)
    out = _attend(q, k, v, window_table(h, w, spec.w, spec.s), probe)
    return ops.reshape(out, (h, w, d))


def base_grid(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rr, cc], axis=-1).astype(np.float64)


def adaptive_offsets(kv, kernel: Tensor, reduce: Tensor, spec: SlideSpec) -> Tensor:
    """Absolute sampling coordinates ``base grid + offset field`` (``H x W x 2``).

    The offset field is a replicate-padded depthwise ``k x k`` conv of ``kv``
    followed by a per-pixel ``D -> 2`` reduction, so it moves with its input.
    """
    kv = _image(kv)
    h, w, d = kv.shape
    if kernel.shape != (spec.k, spec.k, d):
        raise ValueError(f"offset kernel must be {(spec.k, spec.k, d)}, got {kernel.shape}")
    with mac_scope("offset_convs"):
        feat = ops.conv2d_depthwise(kv, kernel, padding="replicate")
    with mac_scope("offset_reduce"):
        delta = ops.linear_project(_flat(feat), reduce)
    return ops.add(ops.reshape(delta, (h, w, 2)), base_grid(h, w))


def _askv_core(q, k, v, p: AttnParams, spec: SlideSpec, h: int, w: int, probe=None):
    d = q.shape[1]
    k_img = ops.reshape(k, (h, w, d))
    v_img = ops.reshape(v, (h, w, d))
    coords_k = adaptive_offsets(k_img, p.offset_kernel_k, p.offset_reduce_k, spec)
    coords_v = adaptive_offsets(v_img, p.offset_kernel_v, p.offset_reduce_v, spec)
    k_shuf = ops.gather_hw(k_img, coords_k)
    v_shuf = ops.gather_hw(v_img, coords_v)
    out = _attend(q, _flat(k_shuf), _flat(v_shuf), window_table(h, w, spec.w, spec.s), probe)
    return ops.reshape(out, (h, w, d)), k_shuf, v_shuf


def askv_sa(x, p: AttnParams, spec: SlideSpec, probe: Optional[Probe] = None):
    """Sliding-window attention over relocated keys/values.

    Returns ``(out, k_shuf, v_shuf)``; the relocated pair feeds :func:`dsa`.
    """
    x = _image(x)
    h, w, _ = x.shape
    spec.check(h, w)
    q, k, v = project_qkv(_flat(x), p)
    return _askv_core(q, k, v, p, spec, h, w, probe)


def dsa(
    q, k_shuf, v_shuf, spec: SlideSpec, pool: str = "avg", probe: Optional[Probe] = None
) -> Tensor:
    """Every query against ``n_d`` pooled key/value tokens.

    ``q``, ``k_shuf`` and ``v_shuf`` are already-projected ``H x W x D`` maps.
    """
    q, k_shuf, v_shuf = _image(q), _image(k_shuf), _image(v_shuf)
    h, w, d = q.shape
    g = spec.grid
    if g > min(h, w):
        raise SpecViolation(f"pool grid {g}x{g} larger than the {h}x{w} input")
    pool_fn = POOLS[pool]
    k_pool = ops.reshape(pool_fn(k_shuf, g, g), (g * g, d))
    v_pool = ops.reshape(pool_fn(v_shuf, g, g), (g * g, d))
    out = _attend(_flat(q), k_pool, v_pool, None, probe, scopes=("dsa", "dsa"))
    return ops.reshape(out, (h, w, d))


def dsa_op(x, p: AttnParams, spec: SlideSpec, pool: str = "avg") -> Tensor:
    """Stand-alone pooled attention on un-relocated projections of ``x``."""
    x = _image(x)
    h, w, d = x.shape
    q, k, v = project_qkv(_flat(x), p)
    shape = (h, w, d)
    return dsa(
        ops.reshape(q, shape), ops.reshape(k, shape), ops.reshape(v, shape), spec, pool
    )


def tea(x, p: AttnParams, spec: SlideSpec, pool: str = "avg") -> Tensor:
    """``alpha_s * askv_sa(x) + alpha_d * dsa(x)`` with projections shared by both branches."""
    x = _image(x)
    h, w, d = x.shape
    spec.check(h, w)
    q, k, v = project_qkv(_flat(x), p)
    local, k_shuf, v_shuf = _askv_core(q, k, v, p, spec, h, w)
    glob = dsa(ops.reshape(q, (h, w, d)), k_shuf, v_shuf, spec, pool)
    return ops.add(ops.mul(local, p.alpha_s), ops.mul(glob, p.alpha_d))


def window_attention(x, p: AttnParams, window: int, probe: Optional[Probe] = None) -> Tensor:
    """Attention inside fixed non-overlapping ``window x window`` blocks."""
    x = _image(x)
    h, w, d = x.shape
    q, k, v = project_qkv(_flat(x), p)
    out = _attend(q, k, v, block_table(h, w, window), probe)
    return ops.reshape(out, (h, w, d))
