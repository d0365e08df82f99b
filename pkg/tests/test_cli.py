import numpy as np
import pytest

from teaformer import attention, cli, ops
from teaformer.attention import SlideSpec
from teaformer.io import read_pnm, save_checkpoint, write_pnm
from teaformer.model import ModelConfig, init_params
from teaformer.training import synthetic_images


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _image(path, size=24, seed=9, channels=3):
    img = synthetic_images(np.random.default_rng(seed), 1, size)[0]
    write_pnm(path, img if channels == 3 else img[..., :1])
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tea.ckpt"
    assert cli.main(["train-toy", "--variant", "tea", "--steps", "3", "--seed", "0", "--out", str(path)]) == 0
    return path


# -- audit ------------------------------------------------------------------------------


def test_audit_skv_interior_exact(capsys):
    code, out, _ = run(capsys, "audit", "--op", "skvsa", "--size", "32x32x4", "--shifts", "2,3", "--seed", "7")
    assert code == 0 and "verdict=interior-exact" in out
    assert out.startswith("# command=audit op=skvsa size=32x32x4") and "seed=7 rng=numpy.PCG64" in out


def test_audit_control_fails(capsys):
    code, out, _ = run(capsys, "audit", "--op", "sa+abs-pos", "--size", "16x16x4", "--shifts", "1,0")
    assert code == 1 and "verdict=fail" in out


def test_audit_tea_sweep_is_approximate(capsys):
    code, out, _ = run(capsys, "audit", "--op", "tea", "--size", "32x32x4", "--shifts", "sweep:4")
    assert code == 0 and "verdict=approximate" in out and "te_score=" in out
    assert out.count("shift (") == 24


@pytest.mark.parametrize("op", ["conv", "sa", "askvsa"])
def test_audit_certified_ops(capsys, op):
    code, out, _ = run(capsys, "audit", "--op", op, "--shifts", "1,0;0,1;3,5")
    assert code == 0, out


def test_audit_model(capsys):
    code, out, _ = run(capsys, "audit", "--op", "model", "--attention", "skv", "--blocks", "2",
                       "--spec", "3,1,3,4", "--shifts", "2,1", "--tol", "1e-8")
    assert code == 0 and "verdict=interior-exact" in out and "margin=6" in out


def test_audit_report_file(capsys, tmp_path):
    report = tmp_path / "audit.txt"
    code, _, _ = run(capsys, "audit", "--op", "conv", "--shifts", "1,0", "--report", str(report))
    assert code == 0 and report.read_text().splitlines()[-1].endswith("verdict=interior-exact")


@pytest.mark.parametrize(
    "argv",
    [
        ["audit", "--op", "nope"],
        ["audit", "--op", "sa", "--size", "32x32"],
        ["audit", "--op", "sa", "--size", "0x4x4"],
        ["audit", "--op", "sa", "--shifts", "9,0"],
        ["audit", "--op", "sa", "--shifts", "one,two"],
        ["audit", "--op", "skvsa", "--size", "8x8x2", "--spec", "7,2,3,4", "--shifts", "1,0"],
        ["audit", "--op", "skvsa", "--spec", "4,1,3,16"],
        ["oracle", "--op", "askvsa", "--cases", "0"],
        ["oracle", "--op", "nope"],
        ["flops", "--op", "tea", "--sizes", "256"],
        ["flops", "--op", "tea", "--sizes", "a,b"],
        ["--threads", "0", "selftest"],
        [],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    code, _, _ = run(capsys, *argv)
    assert code == 2


def test_help_exits_0(capsys):
    assert run(capsys, "--help")[0] == 0


# -- oracle ----------------------------------------------------------------------------


@pytest.mark.parametrize("op,cases", [("sa", 100), ("tea", 25)])
def test_oracle_passes(capsys, op, cases):
    code, out, err = run(capsys, "oracle", "--op", op, "--cases", str(cases), "--seed", "1")
    assert code == 0 and out.rstrip().endswith("pass")
    assert f"cases={cases} rng=numpy.PCG64 seed=1" in out and "time" in err and "time" not in out


def test_oracle_reports_failure(capsys, monkeypatch):
    monkeypatch.setattr(ops, "round_half_away", np.floor)
    code, out, _ = run(capsys, "oracle", "--op", "gather", "--cases", "5")
    assert code == 1 and out.rstrip().endswith("FAIL")


# -- flops -----------------------------------------------------------------------------


def test_flops_tea(capsys, tmp_path):
    csv = tmp_path / "tea.csv"
    code, out, _ = run(capsys, "flops", "--op", "tea", "--sizes", "256,1024,4096", "--spec", "7,2,3,16",
                       "--csv", str(csv))
    assert code == 0 and out.count(" yes ") == 3 and "4.0000" in out
    assert "tea 500D, window-16 attention 512D" not in out  # per-token line uses the given spec
    assert "window-16 attention 512D" in out
    assert len(csv.read_text().splitlines()) == 4


def test_flops_default_spec_per_token(capsys):
    code, out, _ = run(capsys, "flops", "--op", "tea", "--sizes", "4096")
    assert code == 0 and "tea 500D, window-16 attention 512D" in out


def test_flops_sa_quadratic(capsys):
    code, out, _ = run(capsys, "flops", "--op", "sa", "--sizes", "64,256", "--dim", "4")
    assert code == 0 and "16.0000" in out


def test_flops_relaxed_stride(capsys):
    code, out, _ = run(capsys, "flops", "--op", "tea", "--sizes", "256,1024", "--relax-stride")
    assert code == 0 and out.count(" yes ") == 2


# -- train-toy -------------------------------------------------------------------------


def test_train_single_step_curve(capsys, tmp_path):
    out_path = tmp_path / "m.ckpt"
    code, out, _ = run(capsys, "train-toy", "--variant", "wa", "--steps", "1", "--out", str(out_path))
    assert code == 0
    curve = (tmp_path / "m.ckpt.curve.txt").read_text().splitlines()
    assert len(curve) == 1 and curve[0].startswith("0 ")
    assert "seed=0" in out and "initial_loss=" in out


def test_train_is_byte_identical(capsys, tmp_path):
    outputs = []
    for name in ("a", "b"):
        ckpt, curve = tmp_path / f"{name}.ckpt", tmp_path / f"{name}.txt"
        code, out, _ = run(capsys, "train-toy", "--variant", "tea", "--steps", "4", "--seed", "5",
                           "--out", str(ckpt), "--curve", str(curve))
        assert code == 0
        outputs.append((out.replace(str(tmp_path), ""), ckpt.read_bytes(), curve.read_bytes()))
    assert outputs[0][1:] == outputs[1][1:]
    assert outputs[0][0].replace("a.", "b.").replace("/a", "/b") == outputs[1][0]


def test_train_divergence_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "train-toy", "--variant", "tea", "--steps", "50", "--lr", "1e6",
                       "--out", str(tmp_path / "x.ckpt"))
    assert code == 1 and "diverged at step" in err


def test_train_zero_steps_is_usage_error(capsys, tmp_path):
    assert run(capsys, "train-toy", "--variant", "tea", "--steps", "0", "--out", str(tmp_path / "x"))[0] == 2


# -- infer -----------------------------------------------------------------------------


def test_infer_writes_image(capsys, tmp_path, checkpoint):
    src = _image(tmp_path / "in.ppm")
    code, out, _ = run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(src), "--out", str(tmp_path / "o.ppm"))
    assert code == 0 and read_pnm(tmp_path / "o.ppm").shape == (24, 24, 3)


def test_infer_is_deterministic(capsys, tmp_path, checkpoint):
    src = _image(tmp_path / "in.ppm")
    for name in ("a", "b"):
        assert run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(src), "--out", str(tmp_path / f"{name}.ppm"))[0] == 0
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_infer_audit_shift_tea(capsys, tmp_path, checkpoint):
    src = _image(tmp_path / "in.ppm", size=48)
    code, out, _ = run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(src), "--out", str(tmp_path / "o.ppm"),
                       "--audit-shift", "1,2")
    # the desk model's TEA blocks pool globally, so the best it can claim is approximate
    assert code == 0 and "shift (+1,+2)" in out and "verdict=approximate" in out


def test_infer_audit_shift_sliding_model(capsys, tmp_path):
    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=2, spec=SlideSpec(3, 1, 3, 4), attention="skv")
    ckpt = tmp_path / "skv.ckpt"
    save_checkpoint(ckpt, cfg, init_params(cfg, np.random.default_rng(0)))
    src = _image(tmp_path / "in.ppm", size=32)
    code, out, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--in", str(src), "--out", str(tmp_path / "o.ppm"),
                       "--audit-shift=-2,3", "--tol", "1e-8")
    assert code == 0 and "verdict=interior-exact" in out


def test_infer_audit_without_interior_is_usage_error(capsys, tmp_path, checkpoint):
    src = _image(tmp_path / "in.ppm", size=32)
    code, _, err = run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(src), "--out", str(tmp_path / "o.ppm"),
                       "--audit-shift", "1,2")
    assert code == 2 and "leaves nothing" in err


def test_infer_too_small_names_minimum(capsys, tmp_path, checkpoint):
    src = _image(tmp_path / "tiny.ppm", size=8)
    code, _, err = run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(src), "--out", str(tmp_path / "o.ppm"))
    assert code == 2 and "at least 10x10" in err


def test_infer_malformed_header(capsys, tmp_path, checkpoint):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\nxx 4\n255\n")
    code, _, err = run(capsys, "infer", "--ckpt", str(checkpoint), "--in", str(bad), "--out", str(tmp_path / "o.ppm"))
    assert code == 2 and "header" in err


@pytest.mark.parametrize("case", ["scale", "channels", "ckpt", "missing"])
def test_infer_input_errors(capsys, tmp_path, checkpoint, case):
    src = _image(tmp_path / "in.ppm", channels=1 if case == "channels" else 3)
    ckpt = checkpoint
    if case == "ckpt":
        ckpt = tmp_path / "junk.ckpt"
        ckpt.write_bytes(b"junk")
    if case == "missing":
        src = tmp_path / "absent.ppm"
    extra = ["--scale", "2"] if case == "scale" else []
    code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--in", str(src), "--out", str(tmp_path / "o.ppm"), *extra)
    assert code == 2


@pytest.mark.xfail(strict=True, reason="500-step identity training reaches ~16.5 dB, not 40 dB; see the ledger")
def test_identity_checkpoint_reproduces_input(capsys, tmp_path):
    ckpt = tmp_path / "id.ckpt"
    assert run(capsys, "train-toy", "--variant", "tea", "--task", "identity", "--out", str(ckpt))[0] == 0
    src = _image(tmp_path / "in.ppm")
    assert run(capsys, "infer", "--ckpt", str(ckpt), "--in", str(src), "--out", str(tmp_path / "o.ppm"))[0] == 0
    mse = np.mean((read_pnm(src) - read_pnm(tmp_path / "o.ppm")) ** 2)
    assert 10 * np.log10(1.0 / mse) > 40.0


# -- selftest --------------------------------------------------------------------------


def test_selftest_passes(capsys):
    code, out, err = run(capsys, "selftest")
    assert code == 0 and out.rstrip().endswith("selftest passed (7/7)")
    assert "FAIL" not in out and "took" in err


def test_selftest_catches_rounding_mutation(capsys, monkeypatch):
    monkeypatch.setattr(ops, "round_half_away", np.floor)
    code, out, _ = run(capsys, "selftest")
    assert code == 1 and "FAIL oracle equivalence" in out


def test_selftest_catches_window_mutation(capsys, monkeypatch):
    real = attention.window_table

    def off_by_one(height, width, w, s):
        table = real(height, width, w, s)
        return np.where(table + 1 < height * width, table + 1, table)

    monkeypatch.setattr(attention, "window_table", off_by_one)
    code, out, _ = run(capsys, "selftest")
    assert code == 1 and "FAIL" in out


def test_selftest_reports_crashing_check(capsys, monkeypatch):
    from teaformer import suites

    def boom():
        raise RuntimeError("injected")

    monkeypatch.setitem(suites.SELFTEST_CHECKS, "cost model", boom)
    code, out, _ = run(capsys, "selftest")
    assert code == 1 and "FAIL cost model: RuntimeError: injected" in out


def test_threads_flag_accepted(capsys):
    assert run(capsys, "--threads", "1", "flops", "--op", "sa", "--sizes", "16", "--dim", "2")[0] == 0
