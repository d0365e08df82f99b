"""Analytic multiply-accumulate model of TEA, checked against instrumented runs.

Unit convention: 1 MAC = one multiply-accumulate; reported FLOPs = 2 x MACs.
Softmax exponentials/divisions and the offset ``D -> 2`` reduction are outside
the analytic model; measured runs report them separately under ``extras``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import attention
from .attention import AttnParams, SlideSpec, SpecViolation
from .counting import CounterDisabledError, MacCounter, count_macs
from .tensor import Tensor, no_grad

TERMS = ("qkv_proj", "offset_convs", "attn_map", "reweight", "dsa")
SCALING_OPS = ("sa", "skvsa", "tea")


@dataclass(frozen=True)
class CostBreakdown:
    qkv_proj: int = 0
    offset_convs: int = 0
    attn_map: int = 0
    reweight: int = 0
    dsa: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def total(self) -> int:
        return self.qkv_proj + self.offset_convs + self.attn_map + self.reweight + self.dsa

    @property
    def non_projection(self) -> int:
        return self.total - self.qkv_proj

    @property
    def flops(self) -> int:
        return 2 * self.total

    def terms(self) -> tuple[int, ...]:
        return tuple(getattr(self, t) for t in TERMS)


def analytic_cost(n: int, d: int, spec: SlideSpec) -> CostBreakdown:
    """``3ND^2 + 2NDk^2 + Nw^2D + Nw^2D + 2N N_d D`` term by term (exact integers)."""
    if min(n, d) <= 0:
        raise ValueError("N and D must be positive")
    n, d = int(n), int(d)
    return CostBreakdown(
        qkv_proj=3 * n * d * d,
        offset_convs=2 * n * d * spec.k**2,
        attn_map=n * spec.w**2 * d,
        reweight=n * spec.w**2 * d,
        dsa=2 * n * spec.n_d * d,
    )


def analytic_sa_scores(n: int, d: int) -> int:
    return n * n * d


def tea_nonprojection_per_token(d: int, spec: SlideSpec) -> int:
    return 2 * d * spec.k**2 + 2 * spec.w**2 * d + 2 * spec.n_d * d


def window_attention_per_token(d: int, window: int) -> int:
    """Score plus re-weighting MACs of non-overlapping window attention, per token."""
    return 2 * window**2 * d


def measured_cost(run: Callable[[], object], counter: Optional[MacCounter] = None) -> CostBreakdown:
    """Run ``run()`` under a MAC counter and fold the scopes into a breakdown."""
    counter = MacCounter() if counter is None else counter
    if not counter.enabled:
        raise CounterDisabledError("measured_cost needs an enabled counter")
    with count_macs(counter), no_grad():
        run()
    scopes = counter.by_scope
    extras = {k: v for k, v in scopes.items() if k not in TERMS}
    extras.update({f"aux:{k}": v for k, v in counter.aux.items()})
    return CostBreakdown(**{t: scopes.get(t, 0) for t in TERMS}, extras=extras)


def image_shape(n: int) -> tuple[int, int]:
    """Squarest ``H x W`` with ``H * W = n`` and ``H <= W``."""
    h = math.isqrt(n)
    while n % h:
        h -= 1
    return h, n // h


def _inputs(n: int, d: int, spec: SlideSpec, seed: int):
    rng = np.random.default_rng(seed)
    h, w = image_shape(n)
    x = Tensor(rng.normal(size=(h, w, d)))
    p = AttnParams.init(d, spec, rng)
    return x, p


def feasible_stride(spec: SlideSpec, n: int) -> SlideSpec:
    """``spec`` with the largest dilation ``s' <= s`` that fits an ``N``-token image.

    No analytic term depends on ``s``, so the relaxed spec has the same cost.
    Raises :class:`SpecViolation` when not even ``s = 1`` fits.
    """
    h, w = image_shape(n)
    s = min(spec.s, min(h, w) // spec.w)
    if s < 1:
        raise SpecViolation(
            f"window {spec.w} does not fit a {h}x{w} image at any dilation; need at least {spec.w}x{spec.w}"
        )
    relaxed = SlideSpec(spec.w, s, spec.k, spec.n_d)
    relaxed.check(h, w)
    return relaxed


def measure(
    op: str, n: int, d: int, spec: SlideSpec, seed: int = 0, relax_stride: bool = False
) -> CostBreakdown:
    """Instrumented cost of one forward pass of ``op`` on a random ``N``-token image."""
    if relax_stride:
        spec = feasible_stride(spec, n)
    x, p = _inputs(n, d, spec, seed)
    runners = {
        "sa": lambda: attention.self_attention(x, p),
        "skvsa": lambda: attention.skv_sa(x, p, spec),
        "askvsa": lambda: attention.askv_sa(x, p, spec),
        "dsa": lambda: attention.dsa_op(x, p, spec),
        "tea": lambda: attention.tea(x, p, spec),
    }
    if op not in runners:
        raise ValueError(f"unknown op {op!r}; choose from {sorted(runners)}")
    return measured_cost(runners[op])


@dataclass
class ScalingRow:
    n: int
    macs: int
    analytic: Optional[int]
    ratio: Optional[float]

    @property
    def match(self) -> Optional[bool]:
        return None if self.analytic is None else self.macs == self.analytic


@dataclass
class ScalingReport:
    op: str
    d: int
    spec: SlideSpec
    metric: str
    rows: list[ScalingRow]

    def to_text(self) -> str:
        head = f"{'N':>8} {'MACs':>14} {'analytic':>14} {'match':>6} {'ratio':>8}"
        lines = [
            f"# op={self.op} D={self.d} spec={self.spec} metric={self.metric} (FLOPs = 2 x MACs)",
            head,
        ]
        for r in self.rows:
            analytic = "-" if r.analytic is None else str(r.analytic)
            match = "-" if r.match is None else ("yes" if r.match else "NO")
            ratio = "-" if r.ratio is None else f"{r.ratio:.4f}"
            lines.append(f"{r.n:>8} {r.macs:>14} {analytic:>14} {match:>6} {ratio:>8}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["op", "n", "d", "metric", "macs", "flops", "analytic_macs", "match", "ratio"])
        for r in self.rows:
            writer.writerow([
                self.op, r.n, self.d, self.metric, r.macs, 2 * r.macs,
                "" if r.analytic is None else r.analytic,
                "" if r.match is None else int(r.match),
                "" if r.ratio is None else repr(r.ratio),
            ])
        return buf.getvalue()

    @property
    def all_match(self) -> bool:
        return all(r.match is not False for r in self.rows)


def scaling_report(
    op: str,
    sizes: Sequence[int],
    d: int = 8,
    spec: SlideSpec = SlideSpec(),
    seed: int = 0,
    relax_stride: bool = False,
) -> ScalingReport:
    """MACs per size and successive ratios.

    ``sa`` reports its score phase (``N^2 D``); ``skvsa`` and ``tea`` report
    everything except the Q/K/V projections.
    """
    if op not in SCALING_OPS:
        raise ValueError(f"op must be one of {SCALING_OPS}")
    if not sizes:
        raise ValueError("need at least one size")
    rows: list[ScalingRow] = []
    for n in sizes:
        measured = measure(op, n, d, spec, seed, relax_stride)
        if op == "sa":
            macs, analytic, metric = measured.attn_map, analytic_sa_scores(n, d), "score_phase"
        elif op == "skvsa":
            macs = measured.attn_map + measured.reweight
            analytic, metric = 2 * n * spec.w**2 * d, "non_projection"
        else:
            macs, analytic, metric = (
                measured.non_projection, analytic_cost(n, d, spec).non_projection, "non_projection"
            )
        ratio = macs / rows[-1].macs if rows else None
        rows.append(ScalingRow(n, macs, analytic, ratio))
    return ScalingReport(op, d, spec, metric, rows)
