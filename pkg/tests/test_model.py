import math

import numpy as np
import pytest

from teaformer import io, ops
from teaformer.attention import SlideSpec, SpecViolation
from teaformer.equivariance import EmptyRegionError, ShiftOp, audit
from teaformer.model import (
    ModelConfig,
    count_params,
    forward,
    init_params,
    measure_offset_reach,
    model_margin,
    model_operator,
    param_shapes,
    restore_head,
)
from teaformer.tensor import Tensor, grad_check
from teaformer.training import (
    ToyData,
    TrainingDiverged,
    batch_loss,
    desk_config,
    make_data,
    synthetic_images,
    train_toy,
)


def _skv_config(**kw):
    base = dict(embed_dim=4, n_groups=1, n_blocks=2, spec=SlideSpec(3, 1, 3, 4), attention="skv")
    base.update(kw)
    return ModelConfig(**base)


# -- configuration and parameters -----------------------------------------------------


def test_param_count_by_hand():
    # shallow 27+1, attn 3+2+4+2, ffn 1+1+1+1, group conv 9+1, deep 9+1, head 27+3
    cfg = ModelConfig(embed_dim=1, n_groups=1, n_blocks=1, spec=SlideSpec(1, 1, 1, 1), ffn_expansion=1.0)
    assert count_params(cfg) == 93


@pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(attention="wa"), ModelConfig(scale=4), desk_config()])
def test_param_count_matches_registry(cfg):
    shapes = param_shapes(cfg)
    assert count_params(cfg) == sum(math.prod(s) for s in shapes.values())
    params = init_params(cfg, np.random.default_rng(0))
    assert list(params) == list(shapes) and all(params[n].shape == s for n, s in shapes.items())


def test_doubling_blocks_adds_one_block_per_group():
    small, big = ModelConfig(n_blocks=2), ModelConfig(n_blocks=4)
    one_block = (count_params(ModelConfig(n_blocks=3)) - count_params(small))
    assert count_params(big) - count_params(small) == 2 * one_block


def test_config_text_round_trip():
    cfg = ModelConfig(embed_dim=6, spec=SlideSpec(5, 2, 3, 4), attention="wa", scale=2, pool="max")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_text("colour=blue\n")


@pytest.mark.parametrize("kw", [{"scale": 3}, {"attention": "full"}, {"embed_dim": 0}, {"pool": "median"}])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_too_small_input_names_minimum():
    cfg = ModelConfig()
    with pytest.raises(SpecViolation, match="at least 14x14"):
        forward(np.zeros((12, 20, 3)), cfg, init_params(cfg, np.random.default_rng(0)))


def test_wrong_channel_count_rejected():
    cfg = _skv_config()
    with pytest.raises(ValueError, match="H x W x 3"):
        forward(np.zeros((8, 8, 1)), cfg, init_params(cfg, np.random.default_rng(0)))


# -- forward ------------------------------------------------------------------------


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_output_shape(scale):
    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=1, spec=SlideSpec(3, 2, 3, 4), scale=scale)
    out = forward(np.random.default_rng(1).random((12, 10, 3)), cfg, init_params(cfg, np.random.default_rng(0)))
    assert out.shape == (12 * scale, 10 * scale, 3)


def test_zero_deep_branch_reduces_to_shallow_head():
    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=1, spec=SlideSpec(3, 2, 3, 4), scale=2)
    params = init_params(cfg, np.random.default_rng(0), zero_deep=True)
    img = Tensor(np.random.default_rng(1).random((8, 8, 3)))
    shallow = ops.conv2d(img, params["shallow.weight"], params["shallow.bias"], padding="replicate")
    np.testing.assert_array_equal(forward(img, cfg, params).data, restore_head(shallow, params, cfg).data)


def test_forward_is_deterministic():
    cfg = desk_config()
    img = np.random.default_rng(2).random((16, 16, 3))
    a = forward(img, cfg, init_params(cfg, np.random.default_rng([3, 0]))).data
    b = forward(img, cfg, init_params(cfg, np.random.default_rng([3, 0]))).data
    assert a.tobytes() == b.tobytes()


# -- margins and end-to-end audits --------------------------------------------------


def test_model_margin_composition():
    # shallow 1 + group (2 * reach 1 + conv 1) + deep 1 + head 1
    assert model_margin(_skv_config()).extent == 1 + (2 * 1 + 1) + 1 + 1
    assert model_margin(ModelConfig(attention="wa")).is_global
    # default: 1 + 2 * (2 * (reach 6 + conv 1 + offsets) + 1) + 1 + 1
    assert model_margin(ModelConfig(), offset_reach=0).extent == 33
    assert model_margin(ModelConfig(), offset_reach=2).extent == 33 + 4 * 2


@pytest.mark.parametrize("size", [32, 48])
def test_skv_model_is_interior_exact(size):
    cfg = _skv_config()
    params = init_params(cfg, np.random.default_rng([4, 0]))
    x = np.random.default_rng([4, 1]).random((size, size, 3))
    report = audit(model_operator(cfg, params), x, [ShiftOp(2, 3), ShiftOp(-4, 1)], tol=1e-8)
    assert report.verdict == "interior-exact"


def test_pixel_shuffle_scales_the_shift():
    cfg = _skv_config(scale=2)
    params = init_params(cfg, np.random.default_rng([4, 0]))
    op = model_operator(cfg, params)
    x = np.random.default_rng([4, 1]).random((32, 32, 3))
    out = op(x)
    moved = op(ShiftOp(1, 0).apply(x))
    m = 2 * (op.margin.extent + 1)
    np.testing.assert_allclose(moved[m:-m, m:-m], np.roll(out, (2, 0), axis=(0, 1))[m:-m, m:-m], atol=1e-10)
    assert audit(op, x, [ShiftOp(1, 0), ShiftOp(2, 2)], tol=1e-8).verdict == "interior-exact"


def test_default_tea_model_has_no_interior_at_48():
    # the default network's border band is wider than half of a 48 x 48 input
    cfg = ModelConfig(scale=2)
    params = init_params(cfg, np.random.default_rng([0, 0]))
    x = np.random.default_rng([0, 1]).random((48, 48, 3))
    with pytest.raises(EmptyRegionError):
        audit(model_operator(cfg, params), x, [ShiftOp(4, 4)])


def test_tea_model_with_measured_reach_is_approximate():
    cfg = ModelConfig(embed_dim=4, n_groups=1, n_blocks=1, spec=SlideSpec(3, 1, 3, 4))
    params = init_params(cfg, np.random.default_rng([6, 0]), offset_scale=0.5)
    x = np.random.default_rng([6, 1]).random((32, 32, 3))
    reach = measure_offset_reach(x, cfg, params)
    report = audit(model_operator(cfg, params, reach), x, [ShiftOp(1, 2)])
    assert report.verdict == "approximate"


# -- training ------------------------------------------------------------------------


def test_synthetic_images_in_unit_range():
    imgs = synthetic_images(np.random.default_rng(0), 4, 16)
    assert imgs.shape == (4, 16, 16, 3) and imgs.min() >= 0 and imgs.max() <= 1


def test_zero_learning_rate_keeps_parameters():
    cfg = desk_config()
    result = train_toy(cfg, steps=3, seed=1, lr=0.0)
    fresh = init_params(cfg, np.random.default_rng([1, 0]))
    assert all(np.array_equal(result.params[n].data, fresh[n].data) for n in fresh)
    assert len(result.losses) == 3


def test_zero_learning_rate_gives_constant_loss_on_a_fixed_batch():
    # every cyclic shift of a constant image is the same pair
    data = ToyData(np.full((1, 16, 16, 3), 0.5), task="identity")
    result = train_toy(desk_config(), steps=4, seed=1, lr=0.0, data=data)
    assert len(set(result.losses)) == 1


def test_identity_task_learns():
    cfg = desk_config(embed_dim=4)
    result = train_toy(cfg, steps=60, seed=2, lr=1e-2, task="identity", zero_deep=True)
    assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


def test_training_is_deterministic():
    cfg = desk_config(embed_dim=4)
    a = train_toy(cfg, steps=5, seed=3)
    b = train_toy(cfg, steps=5, seed=3)
    assert a.curve_text() == b.curve_text()
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_divergence_is_reported_with_step():
    cfg = desk_config(embed_dim=4)
    with pytest.raises(TrainingDiverged) as info:
        train_toy(cfg, steps=50, seed=0, lr=1e6)
    assert info.value.step < 50


def test_rejects_zero_steps():
    with pytest.raises(ValueError):
        train_toy(desk_config(), steps=0, seed=0)


def test_model_gradients_on_a_parameter_sample():
    cfg = desk_config(embed_dim=4)
    params = init_params(cfg, np.random.default_rng([8, 0]))
    pairs = make_data(8, 16).batch(np.random.default_rng([8, 2]), 1)
    names = list(params)

    def f(*leaves):
        return batch_loss(cfg, dict(zip(names, leaves)), pairs)

    rng = np.random.default_rng([8, 3])
    total = sum(t.size for t in params.values())
    sizes = [t.size for t in params.values()]
    picks = rng.choice(total, size=max(1, total // 100), replace=False)
    offsets = np.cumsum([0] + sizes)
    indices = [(int(np.searchsorted(offsets, p, "right") - 1), int(p - offsets[np.searchsorted(offsets, p, "right") - 1])) for p in picks]
    assert grad_check(f, list(params.values()), indices=indices) <= 1e-3


# -- file formats --------------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (3,), (2, 3, 4)])
def test_tensor_round_trip(tmp_path, dtype, shape):
    arr = np.random.default_rng(0).normal(size=shape).astype(dtype)
    io.save_tensor(tmp_path / "t.tea", arr)
    back = io.load_tensor(tmp_path / "t.tea")
    assert back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_tensor_layout_is_little_endian(tmp_path):
    io.save_tensor(tmp_path / "t.tea", np.array([1.0], dtype=np.float32))
    raw = (tmp_path / "t.tea").read_bytes()
    assert raw == b"TEA1" + bytes([0, 1]) + (1).to_bytes(4, "little") + np.float32(1.0).tobytes()


@pytest.mark.parametrize("raw", [b"TEA2\x01\x00", b"TEA1\x07\x00", b"TEA1\x01\x01\x02\x00", b"TEA1\x01\x01\x02\x00\x00\x00\x00"])
def test_tensor_format_errors(tmp_path, raw):
    (tmp_path / "bad.tea").write_bytes(raw)
    with pytest.raises(io.FormatError):
        io.load_tensor(tmp_path / "bad.tea")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(io.FormatError):
        io.save_tensor(tmp_path / "t.tea", np.zeros(2, dtype=np.int32))


def test_checkpoint_round_trip(tmp_path):
    cfg = desk_config(embed_dim=4)
    params = init_params(cfg, np.random.default_rng(0))
    io.save_checkpoint(tmp_path / "m.ckpt", cfg, params)
    cfg2, params2 = io.load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg and list(params2) == list(params)
    assert all(params2[n].data.tobytes() == params[n].data.tobytes() for n in params)
    img = np.random.default_rng(1).random((16, 16, 3))
    assert forward(img, cfg, params).data.tobytes() == forward(img, cfg2, params2).data.tobytes()


def test_checkpoint_errors(tmp_path):
    cfg = desk_config(embed_dim=4)
    params = init_params(cfg, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(io.FormatError):
        io.load_checkpoint(path)
    io.save_checkpoint(path, cfg, {k: v for k, v in params.items() if k != "deep.bias"})
    with pytest.raises(io.FormatError, match="lacks"):
        io.load_checkpoint(path)
    io.save_checkpoint(path, cfg, params)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(io.FormatError, match="truncated"):
        io.load_checkpoint(path)


@pytest.mark.parametrize("channels,maxval", [(1, 255), (3, 255), (3, 65535)])
def test_pnm_round_trip(tmp_path, channels, maxval):
    img = np.random.default_rng(0).integers(0, maxval + 1, size=(5, 7, channels)) / maxval
    io.write_pnm(tmp_path / "x.pnm", img, maxval)
    back = io.read_pnm(tmp_path / "x.pnm")
    assert back.shape == (5, 7, channels)
    np.testing.assert_allclose(back, img, atol=0.5 / maxval)


def test_pnm_header_comments(tmp_path):
    raw = b"P5\n# made by hand\n2 # width\n1\n255\n\x00\xff"
    (tmp_path / "c.pgm").write_bytes(raw)
    np.testing.assert_array_equal(io.read_pnm(tmp_path / "c.pgm")[..., 0], [[0.0, 1.0]])


@pytest.mark.parametrize("raw", [b"P3\n1 1\n255\n0", b"P6\n2 2\n255\n\x00\x00", b"P5\n0 1\n255\n", b"P5\n1 1\n70000\n\x00"])
def test_pnm_format_errors(tmp_path, raw):
    (tmp_path / "bad.ppm").write_bytes(raw)
    with pytest.raises(io.FormatError):
        io.read_pnm(tmp_path / "bad.ppm")


def test_pnm_rejects_two_channels(tmp_path):
    with pytest.raises(io.FormatError):
        io.write_pnm(tmp_path / "x.ppm", np.zeros((2, 2, 2)))
