"""Command-line front end: ``teaformer <command> [flags]``.

Exit codes: 0 every check passed, 1 a check failed, 2 bad usage or input.
Timings go to stderr so stdout and report files are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import traceback

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

AUDIT_OPS = ("conv", "sa", "sa+abs-pos", "skvsa", "askvsa", "dsa", "tea", "wa", "model")
FLOPS_OPS = ("sa", "skvsa", "tea")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(ValueError):
    pass


def _size(text: str) -> tuple[int, int, int]:
    try:
        h, w, d = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxWxD, got {text!r}") from None
    if min(h, w, d) <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w, d


def _spec(text: str):
    from .attention import SlideSpec

    try:
        return SlideSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) <= 0:
        raise argparse.ArgumentTypeError("need at least one positive size")
    return values


def _shift_pair(text: str) -> tuple[int, int]:
    try:
        dy, dx = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dy,dx, got {text!r}") from None
    return dy, dx


def _header(**fields) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in fields.items())


# -- audit ------------------------------------------------------------------


def _shifts(text: str, mode: str):
    from .equivariance import ShiftOp, shift_grid

    try:
        if text.startswith("sweep:"):
            return shift_grid(int(text[len("sweep:"):]), mode)
        return ShiftOp.parse_list(text, mode)
    except ValueError:
        raise UsageError(f"--shifts must be 'dy,dx[;dy,dx...]' or 'sweep:M', got {text!r}") from None


def _audit_operator(args, x, rng):
    from . import equivariance as eq
    from .attention import AttnParams
    from .model import ModelConfig, init_params, measure_offset_reach, model_operator

    h, w, d = x.shape
    spec = args.spec
    if args.op == "model":
        cfg = ModelConfig(
            embed_dim=args.embed_dim, n_groups=args.groups, n_blocks=args.blocks, spec=spec,
            scale=args.scale, attention=args.attention, window=args.window, pool=args.pool,
            in_channels=d,
        )
        cfg.check_input(h, w)
        params = init_params(cfg, rng, offset_scale=args.offset_scale)
        return model_operator(cfg, params, measure_offset_reach(x, cfg, params))
    if args.op == "conv":
        return eq.conv_operator(rng.normal(size=(spec.k, spec.k, d)))
    p = AttnParams.init(d, spec, rng, offset_scale=args.offset_scale)
    if args.op == "sa":
        return eq.sa_operator(p)
    if args.op == "sa+abs-pos":
        return eq.sa_abs_pos_operator(p, rng.normal(size=x.shape))
    if args.op == "wa":
        return eq.wa_operator(p, args.window)
    if args.op == "dsa":
        return eq.dsa_operator(p, spec, args.pool)
    spec.check(h, w)
    if args.op == "skvsa":
        return eq.skv_operator(p, spec)
    if args.op == "askvsa":
        return eq.askv_operator(p, spec, x)
    return eq.tea_operator(p, spec, x)


def cmd_audit(args) -> int:
    import numpy as np

    from . import equivariance as eq

    h, w, d = args.size
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(h, w, d))
    op = _audit_operator(args, x, rng)
    shifts = _shifts(args.shifts, args.mode)
    limit = min(h, w) / 4
    if any(abs(s.dy) > limit or abs(s.dx) > limit for s in shifts):
        raise UsageError(f"shifts must satisfy |shift| <= min(H, W)/4 = {limit:g}")
    report = eq.audit(op, x, shifts, args.tol)
    print(_header(command="audit", op=args.op, size=f"{h}x{w}x{d}", spec=args.spec,
                  seed=args.seed, rng="numpy.PCG64", global_margin=op.margin.is_global))
    sys.stdout.write(report.to_text())
    if args.report:
        report.write(args.report)
    # global operators (pooled or blocked attention) are only expected to be approximate
    accepted = ("exact", "interior-exact") + (("approximate",) if op.margin.is_global else ())
    return EXIT_OK if report.verdict in accepted else EXIT_FAIL


# -- oracle -----------------------------------------------------------------


def cmd_oracle(args) -> int:
    from .suites import oracle_suite

    if args.cases < 1:
        raise UsageError("--cases must be at least 1")
    summary = oracle_suite(args.op, args.cases, args.seed, args.tol)
    sys.stdout.write(summary.to_text())
    print(f"oracle time {summary.seconds:.2f}s", file=sys.stderr)
    return EXIT_OK if summary.passed else EXIT_FAIL


# -- flops ------------------------------------------------------------------


def cmd_flops(args) -> int:
    from . import cost

    report = cost.scaling_report(args.op, args.sizes, args.dim, args.spec, args.seed, args.relax_stride)
    sys.stdout.write(report.to_text())
    if args.op == "tea":
        per_token = cost.tea_nonprojection_per_token(1, args.spec)
        print(f"# per-token non-projection MACs: tea {per_token}D, window-16 attention "
              f"{cost.window_attention_per_token(1, 16)}D")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    return EXIT_OK if report.all_match else EXIT_FAIL


# -- train-toy --------------------------------------------------------------


def cmd_train_toy(args) -> int:
    from .io import save_checkpoint
    from .training import TrainingDiverged, desk_config, train_toy

    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    cfg = desk_config(args.variant, args.embed_dim)
    print(_header(command="train-toy", variant=args.variant, task=args.task, steps=args.steps,
                  seed=args.seed, lr=args.lr, rng="numpy.PCG64"))
    start = time.perf_counter()
    try:
        result = train_toy(cfg, args.steps, args.seed, lr=args.lr, patch=args.patch,
                           task=args.task, zero_deep=args.zero_deep)
    except TrainingDiverged as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    curve = args.curve or f"{args.out}.curve.txt"
    with open(curve, "w") as fh:
        fh.write(result.curve_text())
    save_checkpoint(args.out, cfg, result.params)
    print(f"initial_loss={result.losses[0]!r} final_loss={result.final_loss()!r}")
    print(f"wrote {args.out} and {curve}")
    return EXIT_OK


# -- infer ------------------------------------------------------------------


def cmd_infer(args) -> int:
    from .equivariance import ShiftOp, audit
    from .io import FormatError, load_checkpoint, read_pnm, write_pnm
    from .model import forward, measure_offset_reach, model_operator
    from .tensor import no_grad

    try:
        cfg, params = load_checkpoint(args.ckpt)
    except FormatError as exc:
        raise UsageError(f"bad checkpoint: {exc}") from None
    if args.scale is not None and args.scale != cfg.scale:
        raise UsageError(f"checkpoint was built for scale {cfg.scale}, not {args.scale}")
    img = read_pnm(args.input)
    if img.shape[2] != cfg.in_channels:
        raise UsageError(f"checkpoint expects {cfg.in_channels} channels, image has {img.shape[2]}")
    cfg.check_input(img.shape[0], img.shape[1])
    with no_grad():
        out = forward(img, cfg, params).data
    write_pnm(args.output, out)
    print(f"wrote {args.output} ({out.shape[0]}x{out.shape[1]})")
    if args.audit_shift is None:
        return EXIT_OK
    op = model_operator(cfg, params, measure_offset_reach(img, cfg, params))
    report = audit(op, img, [ShiftOp(*args.audit_shift)], tol=args.tol)
    sys.stdout.write(report.to_text())
    accepted = ("exact", "interior-exact") + (("approximate",) if op.margin.is_global else ())
    return EXIT_OK if report.verdict in accepted else EXIT_FAIL


# -- selftest ---------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .suites import run_selftest

    start = time.perf_counter()
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        print(f"  {r.name} took {r.seconds:.2f}s", file=sys.stderr)
    ok = all(r.passed for r in results)
    print(f"selftest {'passed' if ok else 'FAILED'} ({sum(r.passed for r in results)}/{len(results)})")
    print(f"selftest time {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .attention import POOLS, SlideSpec
    from .suites import ORACLE_OPS

    parser = argparse.ArgumentParser(prog="teaformer", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 (default) is the bit-reproducible mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="shift-and-compare equivariance audit")
    p.add_argument("--op", choices=AUDIT_OPS, required=True)
    p.add_argument("--size", type=_size, default=(32, 32, 4), help="HxWxD (default 32x32x4)")
    p.add_argument("--shifts", default="sweep:4", help="'dy,dx[;dy,dx...]' or 'sweep:M'")
    p.add_argument("--mode", choices=("cyclic", "crop"), default="cyclic")
    p.add_argument("--tol", type=float, default=None, help="per-pixel tolerance (default 1e-10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", type=_spec, default=SlideSpec(5, 1, 3, 16), help="w,s,k,nd")
    p.add_argument("--pool", choices=sorted(POOLS), default="avg")
    p.add_argument("--offset-scale", type=float, default=0.5)
    p.add_argument("--window", type=int, default=8, help="block size for wa")
    p.add_argument("--attention", choices=("tea", "skv", "wa"), default="tea", help="model only")
    p.add_argument("--embed-dim", type=int, default=8, help="model only")
    p.add_argument("--groups", type=int, default=1, help="model only")
    p.add_argument("--blocks", type=int, default=1, help="model only")
    p.add_argument("--scale", type=int, default=1, help="model only")
    p.add_argument("--report", help="write key=value records here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("oracle", help="randomised comparison with brute-force references")
    p.add_argument("--op", choices=ORACLE_OPS, required=True)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("flops", help="analytic vs counted MACs over a list of sizes")
    p.add_argument("--op", choices=FLOPS_OPS, required=True)
    p.add_argument("--sizes", type=_int_list, default=[256, 1024, 4096], help="token counts N")
    p.add_argument("--spec", type=_spec, default=SlideSpec(), help="w,s,k,nd (default 15,4,3,16)")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--relax-stride", action="store_true",
                   help="shrink s to fit small images (no cost term depends on s)")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("train-toy", help="desk-scale training run")
    p.add_argument("--variant", choices=("wa", "tea"), required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="loss curve path (default <out>.curve.txt)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--task", choices=("denoise", "identity"), default="denoise")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--zero-deep", action="store_true", help="start with the deep branch at zero")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run a checkpoint on a PGM/PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--scale", type=int, default=None, help="must match the checkpoint")
    p.add_argument("--audit-shift", type=_shift_pair, default=None, metavar="DY,DX",
                   help="also audit the model on this image for one shift")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selftest", help="run the built-in invariant battery")
    p.set_defaults(func=cmd_selftest)
    return parser


def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    # thread caps only take effect if set before numpy loads its BLAS
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv) and argv[i + 1].isdigit():
            os.environ.update({v: argv[i + 1] for v in THREAD_VARS})
    else:
        for var in THREAD_VARS:
            os.environ.setdefault(var, "1")
    from .attention import SpecViolation
    from .equivariance import EmptyRegionError
    from .io import FormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (UsageError, SpecViolation, EmptyRegionError, FormatError, OSError) as exc:
        print(f"teaformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
