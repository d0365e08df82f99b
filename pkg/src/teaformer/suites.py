"""Randomised cross-checks shared by the test-suite, ``oracle`` and ``selftest``.

Every case is drawn from ``numpy.random.default_rng([seed, case_index])`` so a
single failing case can be replayed on its own.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import attention, oracles, ops
from .attention import AttnParams, SlideSpec
from .tensor import Tensor, no_grad

RNG_NAME = "numpy.PCG64"
ORACLE_TOL = 1e-12

ATTENTION_OPS = ("sa", "skvsa", "askvsa", "dsa", "tea")
PRIMITIVE_OPS = ("linear", "softmax", "conv-dw", "conv", "avgpool", "maxpool", "gather")
ORACLE_OPS = ATTENTION_OPS + PRIMITIVE_OPS


def random_spec(rng: np.random.Generator, h: int, w: int) -> SlideSpec:
    """A spec that fits an ``h x w`` image, with every field exercised."""
    side = min(h, w)
    s = int(rng.integers(1, 4))
    while s > 1 and s > side:
        s -= 1
    widest = side // s
    widest -= 1 - widest % 2  # largest odd window that fits
    win = int(rng.choice(np.arange(1, widest + 1, 2)))
    k = int(rng.choice([1, 3, 5]))
    g = int(rng.integers(1, min(4, side) + 1))
    return SlideSpec(win, s, k, g * g)


@dataclass
class OracleCase:
    op: str
    index: int
    shape: tuple
    spec: Optional[SlideSpec]
    rel_err: float


def _attention_case(op: str, rng: np.random.Generator, max_side: int, max_dim: int):
    h = int(rng.integers(2, max_side + 1))
    w = int(rng.integers(2, max_side + 1))
    d = int(rng.integers(1, max_dim + 1))
    spec = random_spec(rng, h, w)
    p = AttnParams.init(d, spec, rng, offset_scale=float(rng.uniform(0.5, 3.0)))
    if op == "tea":
        p = p.with_alphas(*rng.normal(size=2))
    pool = str(rng.choice(["avg", "max"]))
    x = rng.normal(size=(h, w, d))
    with no_grad():
        if op == "sa":
            got, ref = attention.self_attention(x, p), oracles.self_attention(x, p)
        elif op == "skvsa":
            got, ref = attention.skv_sa(x, p, spec), oracles.skv_sa(x, p, spec)
        elif op == "askvsa":
            got, ref = attention.askv_sa(x, p, spec)[0], oracles.askv_sa(x, p, spec)
        elif op == "dsa":
            got, ref = attention.dsa_op(x, p, spec, pool), oracles.dsa_op(x, p, spec, pool)
        else:
            got, ref = attention.tea(x, p, spec, pool), oracles.tea(x, p, spec, pool)
    return (h, w, d), spec, oracles.rel_err(got, ref)


def _primitive_case(op: str, rng: np.random.Generator, max_side: int, max_dim: int):
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    c = int(rng.integers(1, max_dim + 1))
    x = rng.normal(size=(h, w, c))
    with no_grad():
        if op == "linear":
            n, m = h * w, int(rng.integers(1, max_dim + 1))
            a, b = rng.normal(size=(n, c)), rng.normal(size=(c, m))
            got, ref = ops.linear_project(Tensor(a), Tensor(b)), oracles.matmul(a, b)
            return (n, c, m), oracles.rel_err(got, ref)
        if op == "softmax":
            a = rng.normal(scale=rng.uniform(0.1, 20), size=(h, w * c))
            return a.shape, oracles.rel_err(ops.softmax_rows(Tensor(a)), oracles.softmax(a))
        if op in ("conv-dw", "conv"):
            k = int(rng.choice([1, 3, 5]))
            pad = str(rng.choice(["zero", "replicate"]))
            if op == "conv-dw":
                kern = rng.normal(size=(k, k, c))
                got = ops.conv2d_depthwise(Tensor(x), Tensor(kern), pad)
                ref = oracles.conv_depthwise(x, kern, pad)
            else:
                c_out = int(rng.integers(1, max_dim + 1))
                kern, bias = rng.normal(size=(k, k, c, c_out)), rng.normal(size=c_out)
                got = ops.conv2d(Tensor(x), Tensor(kern), Tensor(bias), pad)
                ref = oracles.conv_dense(x, kern, bias, pad)
            return x.shape, oracles.rel_err(got, ref)
        if op in ("avgpool", "maxpool"):
            oh, ow = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
            if op == "avgpool":
                got, ref = ops.avg_pool_adaptive(Tensor(x), oh, ow), oracles.avg_pool(x, oh, ow)
            else:
                got, ref = ops.max_pool_adaptive(Tensor(x), oh, ow), oracles.max_pool(x, oh, ow)
            return x.shape, oracles.rel_err(got, ref)
        if op == "gather":
            coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), -1)
            coords = coords + rng.normal(scale=3.0, size=(h, w, 2))
            coords[0, 0] = (0.5, -1.5)  # exact halves round away from zero
            got = ops.gather_hw(Tensor(x), coords)
            return x.shape, oracles.rel_err(got, oracles.gather(x, coords))
    raise ValueError(f"unknown op {op!r}")


@dataclass
class OracleSummary:
    op: str
    seed: int
    tol: float
    cases: list[OracleCase] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((c.rel_err for c in self.cases), default=0.0)

    @property
    def worst(self) -> Optional[OracleCase]:
        return max(self.cases, key=lambda c: c.rel_err, default=None)

    @property
    def passed(self) -> bool:
        return all(c.rel_err <= self.tol for c in self.cases)

    def to_text(self) -> str:
        worst = self.worst
        where = "" if worst is None else f" worst_case={worst.index} shape={worst.shape}"
        if worst is not None and worst.spec is not None:
            where += f" spec={worst.spec}"
        status = "pass" if self.passed else "FAIL"
        return (
            f"oracle op={self.op} cases={len(self.cases)} rng={RNG_NAME} seed={self.seed} "
            f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}{where} {status}\n"
        )


def oracle_suite(
    op: str,
    cases: int,
    seed: int,
    tol: float = ORACLE_TOL,
    max_side: int = 16,
    max_dim: int = 8,
) -> OracleSummary:
    """Compare the vectorised ``op`` with its brute-force oracle on ``cases`` random f64 inputs."""
    if op not in ORACLE_OPS:
        raise ValueError(f"unknown op {op!r}; choose from {ORACLE_OPS}")
    if cases < 1:
        raise ValueError("cases must be at least 1")
    summary = OracleSummary(op, seed, tol)
    start = time.perf_counter()
    for i in range(cases):
        rng = np.random.default_rng([seed, i])
        if op in ATTENTION_OPS:
            shape, spec, err = _attention_case(op, rng, max_side, max_dim)
        else:
            (shape, err), spec = _primitive_case(op, rng, max_side, max_dim), None
        summary.cases.append(OracleCase(op, i, shape, spec, err))
    summary.seconds = time.perf_counter() - start
    return summary


# -- degeneration chain -----------------------------------------------------


def _max_dev(a, b) -> float:
    return float(np.max(np.abs(np.asarray(getattr(a, "data", a)) - np.asarray(getattr(b, "data", b)))))


def degeneration_checks(seed: int = 0, d: int = 4) -> dict[str, float]:
    """Max deviation of each special case from the operator it should collapse to."""
    rng = np.random.default_rng([seed, 3])
    out = {}
    with no_grad():
        spec = SlideSpec(5, 2, 3, 4)
        x = rng.normal(size=(12, 11, d))
        p = AttnParams.init(d, spec, rng, offset_scale=2.0)
        out["zero offsets: askvsa == skvsa"] = _max_dev(
            attention.askv_sa(x, p.with_zero_offsets(), spec)[0], attention.skv_sa(x, p, spec)
        )
        full = SlideSpec(7, 1, 3, 4)  # one window covers the whole 7 x 7 image
        x7 = rng.normal(size=(7, 7, d))
        out["full window: skvsa == sa"] = _max_dev(
            attention.skv_sa(x7, p, full), attention.self_attention(x7, p)
        )
        ident = SlideSpec(3, 1, 3, 36)  # 6 x 6 pooling grid on a 6 x 6 image
        x6 = rng.normal(size=(6, 6, d))
        for pool in attention.POOLS:
            out[f"identity {pool} pooling: dsa == sa"] = _max_dev(
                attention.dsa_op(x6, p, ident, pool), attention.self_attention(x6, p)
            )
        out["alpha_d = 0: tea == askvsa"] = _max_dev(
            attention.tea(x, p.with_alphas(1.0, 0.0), spec), attention.askv_sa(x, p, spec)[0]
        )
    return out


# -- selftest ---------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _check_oracles() -> tuple[bool, str]:
    worst = 0.0
    for op in ORACLE_OPS:
        summary = oracle_suite(op, 6, seed=11, max_side=10, max_dim=5)
        worst = max(worst, summary.max_rel_err)
        if not summary.passed:
            return False, summary.to_text().strip()
    return True, f"max rel err {worst:.2e} over {len(ORACLE_OPS)} ops"


def _check_degeneration() -> tuple[bool, str]:
    devs = degeneration_checks(seed=5)
    worst = max(devs, key=devs.get)
    return devs[worst] <= 1e-10, f"worst {worst!r}: {devs[worst]:.2e}"


def _check_gradients() -> tuple[bool, str]:
    from .tensor import grad_check

    rng = np.random.default_rng([5, 4])
    spec = SlideSpec(3, 2, 3, 4)
    p = AttnParams.init(4, spec, rng, offset_scale=1.5)
    x = Tensor(rng.normal(size=(8, 8, 4)))
    names = list(p.tensors())
    readout = rng.normal(size=(8, 8, 4))

    def f(x_, *leaves):
        q = AttnParams(**dict(zip(names, leaves)))
        return ops.sum_(ops.mul(attention.tea(x_, q, spec), readout))

    probe_rng = np.random.default_rng([5, 5])
    inputs = [x, *p.tensors().values()]
    indices = [(n, int(probe_rng.integers(t.size))) for n, t in enumerate(inputs) for _ in range(3)]
    err = grad_check(f, inputs, indices=indices)
    return err <= 1e-3, f"tea block rel err {err:.2e}"


def _check_audits() -> tuple[bool, str]:
    from . import equivariance as eq

    rng = np.random.default_rng([5, 6])
    spec = SlideSpec(5, 1, 3, 16)
    p = AttnParams.init(4, spec, rng, offset_scale=0.5)
    x = rng.normal(size=(32, 32, 4))
    shifts = [eq.ShiftOp(2, 3), eq.ShiftOp(-4, 1)]
    certified = [
        eq.audit(eq.conv_operator(rng.normal(size=(3, 3, 4))), x, shifts),
        eq.audit(eq.skv_operator(p, spec), x, shifts),
        eq.audit(eq.askv_operator(p, spec, x), x, shifts),
    ]
    control = eq.audit(
        eq.sa_abs_pos_operator(p, rng.normal(size=x.shape)), x, [eq.ShiftOp(1, 0)]
    )
    ok = all(r.certified for r in certified) and control.verdict == "fail"
    verdicts = ", ".join(f"{r.operator}={r.verdict}" for r in certified)
    return ok, f"{verdicts}; control={control.verdict}"


def _check_cost() -> tuple[bool, str]:
    from . import cost

    spec = SlideSpec(7, 2, 3, 16)
    bad = [
        n for n in (256, 1024) for d in (4, 8)
        if cost.measure("tea", n, d, spec).terms() != cost.analytic_cost(n, d, spec).terms()
    ]
    tea = cost.scaling_report("tea", [256, 1024], d=4, spec=spec)
    sa = cost.scaling_report("sa", [64, 256], d=4, spec=spec)
    ok = not bad and tea.rows[-1].ratio == 4.0 and sa.rows[-1].ratio == 16.0
    return ok, f"mismatches={bad} tea ratio={tea.rows[-1].ratio} sa ratio={sa.rows[-1].ratio}"


def _check_io() -> tuple[bool, str]:
    import io as _io
    import tempfile
    from pathlib import Path

    from . import io as tio
    from .model import ModelConfig, init_params

    rng = np.random.default_rng([5, 7])
    arr = rng.normal(size=(3, 4, 2))
    buf = _io.BytesIO()
    tio.write_tensor(buf, arr)
    buf.seek(0)
    same_tensor = np.array_equal(tio.read_tensor(buf), arr)
    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=1, spec=SlideSpec(3, 1, 3, 4))
    params = init_params(cfg, rng)
    img = rng.integers(0, 256, size=(5, 6, 3)) / 255.0
    with tempfile.TemporaryDirectory() as tmp:
        ckpt, ppm = Path(tmp) / "m.ckpt", Path(tmp) / "i.ppm"
        tio.save_checkpoint(ckpt, cfg, params)
        cfg2, params2 = tio.load_checkpoint(ckpt)
        tio.write_pnm(ppm, img)
        same_img = np.allclose(tio.read_pnm(ppm), img, atol=1e-12)
    same_ckpt = cfg2 == cfg and all(np.array_equal(params[k].data, params2[k].data) for k in params)
    ok = same_tensor and same_ckpt and same_img
    return ok, f"tensor={same_tensor} checkpoint={same_ckpt} image={same_img}"


def _check_determinism() -> tuple[bool, str]:
    from .model import ModelConfig
    from .training import train_toy

    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=1, spec=SlideSpec(3, 2, 3, 4))
    a = train_toy(cfg, 3, seed=3, patch=8, batch_size=1).curve_text()
    b = train_toy(cfg, 3, seed=3, patch=8, batch_size=1).curve_text()
    return a == b, f"curves identical={a == b}"


SELFTEST_CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "oracle equivalence": _check_oracles,
    "degeneration chain": _check_degeneration,
    "gradient integrity": _check_gradients,
    "equivariance audits": _check_audits,
    "cost model": _check_cost,
    "file formats": _check_io,
    "determinism": _check_determinism,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, check in SELFTEST_CHECKS.items():
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
