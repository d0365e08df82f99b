"""Shift-and-compare audits of image-to-image operators.

An audit shifts the input, runs the operator, and compares the result with
the shifted output of the unshifted run. Pixels near the image border, where
boundary handling legitimately differs between the two frames, are excluded
through a per-operator :class:`Margin`.

    report = audit(conv_operator(kernel), x, [ShiftOp(1, 0), ShiftOp(3, 5)])
    report.verdict   # "interior-exact"
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import attention, ops
from .attention import AttnParams, SlideSpec
from .tensor import Tensor, no_grad

VERDICTS = ("exact", "interior-exact", "approximate", "fail")

DEFAULT_TOL = {np.dtype(np.float64): 1e-10, np.dtype(np.float32): 1e-5}

# Largest deviation, relative to the reference output's spread, that still
# counts as "approximate" rather than "fail".
APPROX_RTOL = 0.25


class EmptyRegionError(ValueError):
    """The margins leave no pixel to compare."""


# -- shifts -----------------------------------------------------------------


@dataclass(frozen=True)
class ShiftOp:
    dy: int
    dx: int
    mode: str = "cyclic"

    def __post_init__(self):
        if self.mode not in ("cyclic", "crop"):
            raise ValueError(f"unknown shift mode {self.mode!r}")

    def apply(self, x: np.ndarray, scale: int = 1) -> np.ndarray:
        """Move content by ``(dy, dx) * scale``: ``out[i, j] = x[i - dy, j - dx]``."""
        dy, dx = self.dy * scale, self.dx * scale
        if self.mode == "cyclic":
            return np.roll(x, (dy, dx), axis=(0, 1))
        out = np.zeros_like(x)
        h, w = x.shape[:2]
        src_r = slice(max(0, -dy), min(h, h - dy))
        dst_r = slice(max(0, dy), min(h, h + dy))
        src_c = slice(max(0, -dx), min(w, w - dx))
        dst_c = slice(max(0, dx), min(w, w + dx))
        out[dst_r, dst_c] = x[src_r, src_c]
        return out

    @property
    def magnitude(self) -> int:
        return max(abs(self.dy), abs(self.dx))

    @classmethod
    def parse_list(cls, text: str, mode: str = "cyclic") -> list["ShiftOp"]:
        """``"2,3"`` or ``"1,0;0,1"`` -> shifts."""
        shifts = []
        for chunk in text.split(";"):
            dy, dx = (int(v) for v in chunk.split(","))
            shifts.append(cls(dy, dx, mode))
        return shifts


def shift_grid(max_shift: int, mode: str = "cyclic", signed: bool = False) -> list[ShiftOp]:
    """All ``(dy, dx)`` in ``[0, max_shift]^2`` (or ``[-m, m]^2``) except ``(0, 0)``."""
    lo = -max_shift if signed else 0
    rng = range(lo, max_shift + 1)
    return [ShiftOp(dy, dx, mode) for dy, dx in itertools.product(rng, rng) if (dy, dx) != (0, 0)]


# -- margins ----------------------------------------------------------------


@dataclass(frozen=True)
class Margin:
    """Border band (in input pixels) excluded from comparison.

    ``is_global`` marks operators that mix information across the whole image
    (pooled attention); their deviation is not confined to a border band, so
    they can only be certified for shifts that preserve their pooling grid.
    """

    extent: int = 0
    is_global: bool = False

    def then(self, other: "Margin") -> "Margin":
        """Serial composition: margins add."""
        return Margin(self.extent + other.extent, self.is_global or other.is_global)

    def alongside(self, other: "Margin") -> "Margin":
        """Parallel composition: the wider margin wins."""
        return Margin(max(self.extent, other.extent), self.is_global or other.is_global)


def conv_margin(k: int) -> Margin:
    return Margin((k - 1) // 2)


def sliding_margin(spec: SlideSpec) -> Margin:
    return Margin(spec.reach)


def adaptive_margin(spec: SlideSpec, offset_reach: int = 0) -> Margin:
    """Window reach plus offset-conv support plus how far the offsets relocate pixels."""
    return Margin(spec.reach + (spec.k - 1) // 2 + offset_reach)


GLOBAL = Margin(0, is_global=True)


def offset_reach(x: np.ndarray, p: AttnParams, spec: SlideSpec) -> int:
    """``ceil(max |offset|)`` over the key and value offset fields produced from ``x``."""
    h, w, d = x.shape
    with no_grad():
        q, k, v = attention.project_qkv(Tensor(x.reshape(h * w, d)), p)
        reach = 0.0
        for src, kern, red in (
            (k, p.offset_kernel_k, p.offset_reduce_k),
            (v, p.offset_kernel_v, p.offset_reduce_v),
        ):
            coords = attention.adaptive_offsets(Tensor(src.data.reshape(h, w, d)), kern, red, spec)
            reach = max(reach, float(np.abs(coords.data - attention.base_grid(h, w)).max()))
    return int(math.ceil(reach))


# -- operators --------------------------------------------------------------


@dataclass(frozen=True)
class Operator:
    """An image-to-image map with its declared margin and output scale."""

    fn: Callable[[np.ndarray], np.ndarray]
    margin: Margin
    name: str = "op"
    scale: int = 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            out = self.fn(x)
        return out.data if isinstance(out, Tensor) else np.asarray(out)


def serial(first: Operator, second: Operator) -> Operator:
    """``second(first(x))``."""
    if first.scale != 1:
        raise ValueError("only the last operator of a chain may change resolution")
    return Operator(
        lambda x: second(first(x)),
        first.margin.then(second.margin),
        f"{second.name}({first.name})",
        second.scale,
    )


def parallel(a: Operator, b: Operator) -> Operator:
    """``a(x) + b(x)``."""
    if a.scale != b.scale:
        raise ValueError("parallel operators must share an output scale")
    return Operator(
        lambda x: a(x) + b(x), a.margin.alongside(b.margin), f"{a.name}+{b.name}", a.scale
    )


def identity_operator() -> Operator:
    return Operator(lambda x: x, Margin(0), "identity")


def conv_operator(kernel: np.ndarray, padding: str = "replicate") -> Operator:
    kernel_t = Tensor(kernel)
    return Operator(
        lambda x: ops.conv2d_depthwise(Tensor(x), kernel_t, padding),
        conv_margin(kernel.shape[0]),
        f"conv{kernel.shape[0]}",
    )


def pointwise_operator(weight: np.ndarray) -> Operator:
    w_t = Tensor(weight)

    def fn(x):
        h, w, d = x.shape
        return ops.linear_project(Tensor(x.reshape(h * w, d)), w_t).data.reshape(h, w, -1)

    return Operator(fn, Margin(0), "pointwise")


def sa_operator(p: AttnParams) -> Operator:
    return Operator(lambda x: attention.self_attention(Tensor(x), p), Margin(0), "sa")


def sa_abs_pos_operator(p: AttnParams, position: np.ndarray) -> Operator:
    """Control: self-attention on ``x + P`` with a fixed absolute position map ``P``."""
    return Operator(
        lambda x: attention.self_attention(Tensor(x + position), p), Margin(0), "sa+abs-pos"
    )


def skv_operator(p: AttnParams, spec: SlideSpec) -> Operator:
    return Operator(lambda x: attention.skv_sa(Tensor(x), p, spec), sliding_margin(spec), "skvsa")


def askv_operator(p: AttnParams, spec: SlideSpec, x: Optional[np.ndarray] = None) -> Operator:
    """Adaptive sliding attention; with ``x`` the offset reach is measured on it."""
    reach = offset_reach(x, p, spec) if x is not None else 0
    return Operator(
        lambda img: attention.askv_sa(Tensor(img), p, spec)[0],
        adaptive_margin(spec, reach),
        "askvsa",
    )


def dsa_operator(p: AttnParams, spec: SlideSpec, pool: str = "avg") -> Operator:
    return Operator(lambda x: attention.dsa_op(Tensor(x), p, spec, pool), GLOBAL, f"dsa[{pool}]")


def tea_operator(p: AttnParams, spec: SlideSpec, x: Optional[np.ndarray] = None) -> Operator:
    reach = offset_reach(x, p, spec) if x is not None else 0
    margin = adaptive_margin(spec, reach).alongside(GLOBAL)
    return Operator(lambda img: attention.tea(Tensor(img), p, spec), margin, "tea")


def wa_operator(p: AttnParams, window: int) -> Operator:
    return Operator(
        lambda x: attention.window_attention(Tensor(x), p, window), GLOBAL, f"wa{window}"
    )


# -- reports ----------------------------------------------------------------


@dataclass
class ShiftRecord:
    dy: int
    dx: int
    mode: str
    margin: int
    max_abs_dev: float
    mean_abs_dev: float
    compared: int
    passed: int

    @property
    def te_score(self) -> float:
        return self.passed / self.compared


@dataclass
class EquivReport:
    operator: str
    tol: float
    records: list[ShiftRecord] = field(default_factory=list)
    spread: float = 0.0
    margin: int = 0

    @property
    def te_score(self) -> float:
        compared = sum(r.compared for r in self.records)
        return sum(r.passed for r in self.records) / compared if compared else 1.0

    @property
    def max_abs_dev(self) -> float:
        return max((r.max_abs_dev for r in self.records), default=0.0)

    @property
    def verdict(self) -> str:
        if all(r.passed == r.compared for r in self.records):
            return "exact" if self.margin == 0 else "interior-exact"
        scale = self.spread if self.spread > 0 else 1.0
        return "approximate" if self.max_abs_dev <= APPROX_RTOL * scale else "fail"

    @property
    def certified(self) -> bool:
        return self.verdict in ("exact", "interior-exact")

    def to_text(self) -> str:
        lines = [f"operator {self.operator}  tol={self.tol:.1e}  margin={self.margin}"]
        for r in self.records:
            status = "ok" if r.passed == r.compared else "DEV"
            lines.append(
                f"  shift ({r.dy:+d},{r.dx:+d}) {r.mode:<6} max_dev={r.max_abs_dev:.3e} "
                f"mean_dev={r.mean_abs_dev:.3e} pass={r.passed}/{r.compared} {status}"
            )
        lines.append(f"te_score={self.te_score:.6f} verdict={self.verdict}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        """One ``key=value`` line per shift, then a summary line."""
        lines = [
            f"dy={r.dy} dx={r.dx} mode={r.mode} margin={r.margin} "
            f"max_abs_dev={r.max_abs_dev!r} mean_abs_dev={r.mean_abs_dev!r} "
            f"compared={r.compared} passed={r.passed}"
            for r in self.records
        ]
        lines.append(
            f"summary operator={self.operator} tol={self.tol!r} te_score={self.te_score!r} "
            f"verdict={self.verdict}"
        )
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_records())

    @classmethod
    def read_records(cls, text: str) -> list[dict[str, str]]:
        return [dict(tok.split("=", 1) for tok in line.split() if "=" in tok) for line in text.splitlines()]


# -- audits -----------------------------------------------------------------


def _compare(a: np.ndarray, b: np.ndarray, rows: slice, cols: slice, tol: float):
    dev = np.abs(a[rows, cols] - b[rows, cols])
    per_pixel = dev.reshape(dev.shape[0], dev.shape[1], -1).max(axis=-1)
    return float(per_pixel.max()), float(dev.mean()), per_pixel.size, int((per_pixel <= tol).sum())


def audit(
    op: Operator,
    x: np.ndarray,
    shifts: Sequence[ShiftOp],
    tol: Optional[float] = None,
    margin: Optional[int] = None,
) -> EquivReport:
    """Compare ``op(T(x))`` with ``T(op(x))`` inside the margin-shrunk interior."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    tol = DEFAULT_TOL.get(x.dtype, 1e-10) if tol is None else tol
    declared = op.margin.extent
    margin = declared if margin is None else margin
    if margin < declared:
        raise ValueError(f"margin {margin} below the operator's declared margin {declared}")
    h, w = x.shape[:2]
    limit = min(h, w) / 4
    for s in shifts:
        if abs(s.dy) > limit or abs(s.dx) > limit:
            raise ValueError(f"shift ({s.dy},{s.dx}) exceeds min(H, W)/4 = {limit}")
    r = op.scale
    reference = op(x)
    report = EquivReport(op.name, tol, spread=float(reference.std()), margin=margin)
    out_h, out_w = reference.shape[:2]
    for s in shifts:
        band_r = r * (margin + abs(s.dy))
        band_c = r * (margin + abs(s.dx))
        if 2 * band_r >= out_h or 2 * band_c >= out_w:
            raise EmptyRegionError(
                f"margin {margin} with shift ({s.dy},{s.dx}) leaves nothing of a {h}x{w} input"
            )
        moved = op(s.apply(x))
        expected = s.apply(reference, scale=r)
        rows, cols = slice(band_r, out_h - band_r), slice(band_c, out_w - band_c)
        max_dev, mean_dev, compared, passed = _compare(moved, expected, rows, cols, tol)
        report.records.append(
            ShiftRecord(s.dy, s.dx, s.mode, margin, max_dev, mean_dev, compared, passed)
        )
    return report


def audit_composition(
    operators: Sequence[Operator],
    mode: str,
    x: np.ndarray,
    shifts: Sequence[ShiftOp],
    tol: Optional[float] = None,
) -> EquivReport:
    """Certify each operator, then audit their serial chain or parallel sum."""
    if mode not in ("serial", "parallel"):
        raise ValueError(f"mode must be serial or parallel, got {mode!r}")
    if not operators:
        raise ValueError("nothing to compose")
    for op in operators:
        single = audit(op, x, shifts, tol)
        if not single.certified:
            raise ValueError(f"{op.name} is not certified ({single.verdict}) for these shifts")
    combined = operators[0]
    for op in operators[1:]:
        combined = serial(combined, op) if mode == "serial" else parallel(combined, op)
    return audit(combined, x, shifts, tol)


def te_score_sweep(
    op: Operator, x: np.ndarray, max_shift: int, tol: Optional[float] = None
) -> float:
    """Mean per-shift te_score over ``[0, max_shift]^2`` minus the zero shift."""
    shifts = shift_grid(max_shift)
    if not shifts:
        return 1.0
    report = audit(op, x, shifts, tol)
    return float(np.mean([r.te_score for r in report.records]))
