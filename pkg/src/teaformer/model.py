"""A small restoration transformer built from the attention operators.

Layout (image ``H x W x 3`` in, ``rH x rW x 3`` out)::

    F0  = conv3x3(img)
    F   = F0
    for each group:   F = F + conv3x3(blocks(F))      # residual in residual
        block:        F = F + attn(F);  F = F + ffn(F)
    F1  = conv3x3(F)
    out = pixel_shuffle(conv3x3(F0 + F1), r)

There is no normalisation layer. Parameters live in a flat ordered
``dict[str, Tensor]`` so checkpoints, SGD and gradient checks all iterate the
same registry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import attention, ops
from .attention import AttnParams, SlideSpec
from .equivariance import (
    GLOBAL,
    Margin,
    Operator,
    adaptive_margin,
    conv_margin,
    offset_reach,
    sliding_margin,
)
from .tensor import Tensor, as_tensor, no_grad

ATTENTION_KINDS = ("tea", "wa", "skv")
SCALES = (1, 2, 4)
CONV_K = 3

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    n_groups: int = 2
    n_blocks: int = 2
    spec: SlideSpec = field(default_factory=lambda: SlideSpec(7, 2, 3, 16))
    scale: int = 1
    ffn_expansion: float = 2.0
    attention: str = "tea"
    window: int = 8  # block size for the "wa" variant
    pool: str = "avg"
    in_channels: int = 3

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}")
        if min(self.embed_dim, self.n_groups, self.n_blocks) <= 0 or self.ffn_expansion <= 0:
            raise ValueError("embed_dim, n_groups, n_blocks and ffn_expansion must be positive")
        if self.pool not in attention.POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.ffn_expansion)))

    def min_size(self) -> int:
        if self.attention == "wa":
            return self.window
        return max(self.spec.w * self.spec.s, self.spec.grid)

    def check_input(self, h: int, w: int) -> None:
        if self.attention == "wa":
            attention.block_table(h, w, self.window)
            return
        need = self.min_size()
        if min(h, w) < need:
            raise attention.SpecViolation(
                f"{h}x{w} input is too small for spec {self.spec}; need an image of at least {need}x{need}"
            )

    # flat key=value text
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw.pop(f.name)
            if f.name == "spec":
                kwargs[f.name] = SlideSpec.parse(value)
            elif f.name == "ffn_expansion":
                kwargs[f.name] = float(value)
            elif f.name in ("attention", "pool"):
                kwargs[f.name] = value
            else:
                kwargs[f.name] = int(value)
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def _attn_names(cfg: ModelConfig) -> list[str]:
    if cfg.attention != "tea":
        return ["w_q", "w_k", "w_v"]
    return [f.name for f in fields(AttnParams)]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Registry of every parameter name and shape, in checkpoint order."""
    d, hd, k = cfg.embed_dim, cfg.hidden_dim, cfg.spec.k
    out_ch = 3 * cfg.scale**2
    attn_shapes = {
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "offset_kernel_k": (k, k, d),
        "offset_kernel_v": (k, k, d),
        "offset_reduce_k": (d, 2),
        "offset_reduce_v": (d, 2),
        "alpha_s": (),
        "alpha_d": (),
    }
    shapes = {
        "shallow.weight": (CONV_K, CONV_K, cfg.in_channels, d),
        "shallow.bias": (d,),
    }
    for g in range(cfg.n_groups):
        for b in range(cfg.n_blocks):
            prefix = f"g{g}.b{b}"
            for name in _attn_names(cfg):
                shapes[f"{prefix}.attn.{name}"] = attn_shapes[name]
            shapes[f"{prefix}.ffn.w1"] = (d, hd)
            shapes[f"{prefix}.ffn.b1"] = (hd,)
            shapes[f"{prefix}.ffn.w2"] = (hd, d)
            shapes[f"{prefix}.ffn.b2"] = (d,)
        shapes[f"g{g}.conv.weight"] = (CONV_K, CONV_K, d, d)
        shapes[f"g{g}.conv.bias"] = (d,)
    shapes["deep.weight"] = (CONV_K, CONV_K, d, d)
    shapes["deep.bias"] = (d,)
    shapes["head.weight"] = (CONV_K, CONV_K, d, out_ch)
    shapes["head.bias"] = (out_ch,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, hd, k, c = cfg.embed_dim, cfg.hidden_dim, cfg.spec.k, cfg.in_channels
    conv = CONV_K * CONV_K
    out_ch = 3 * cfg.scale**2
    attn = 3 * d * d
    if cfg.attention == "tea":
        attn += 2 * k * k * d + 2 * 2 * d + 2
    ffn = 2 * d * hd + hd + d
    group = cfg.n_blocks * (attn + ffn) + conv * d * d + d
    return (conv * c * d + d) + cfg.n_groups * group + (conv * d * d + d) + (conv * d * out_ch + out_ch)


def init_params(
    cfg: ModelConfig,
    rng: np.random.Generator,
    zero_deep: bool = False,
    offset_scale: float = 1.0,
) -> Params:
    """Fan-in scaled Gaussian weights, zero biases, ``alpha_s = alpha_d = 1``."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("alpha"):
            value = np.ones(shape)
        elif leaf.startswith(("bias", "b1", "b2")):
            value = np.zeros(shape)
        elif leaf.startswith("offset_kernel"):
            value = rng.normal(0.0, offset_scale / cfg.spec.k, size=shape)
        else:
            fan_in = math.prod(shape[:-1])
            value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    if zero_deep:
        for name in ("deep.weight", "deep.bias"):
            params[name] = Tensor(np.zeros(params[name].shape), requires_grad=True, name=name)
    return params


def block_attn_params(params: Params, prefix: str, cfg: ModelConfig) -> AttnParams:
    if cfg.attention != "tea":
        d = cfg.embed_dim
        zeros = Tensor(np.zeros((cfg.spec.k, cfg.spec.k, d)))
        red = Tensor(np.zeros((d, 2)))
        one = Tensor(1.0)
        return AttnParams(
            params[f"{prefix}.w_q"], params[f"{prefix}.w_k"], params[f"{prefix}.w_v"],
            zeros, zeros, red, red, one, one,
        )
    return AttnParams(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(AttnParams)})


def _attend(x: Tensor, p: AttnParams, cfg: ModelConfig) -> Tensor:
    if cfg.attention == "tea":
        return attention.tea(x, p, cfg.spec, cfg.pool)
    if cfg.attention == "skv":
        return attention.skv_sa(x, p, cfg.spec)
    return attention.window_attention(x, p, cfg.window)


def _ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h, w, d = x.shape
    flat = ops.reshape(x, (h * w, d))
    hidden = ops.gelu(ops.add(ops.linear_project(flat, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    out = ops.add(ops.linear_project(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return ops.reshape(out, (h, w, d))


def _conv(x: Tensor, params: Params, name: str) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding="replicate")


def pixel_shuffle_upsample(x, r: int) -> Tensor:
    return ops.pixel_shuffle(as_tensor(x), r)


def deep_features(f0: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    feat = f0
    for g in range(cfg.n_groups):
        inner = feat
        for b in range(cfg.n_blocks):
            prefix = f"g{g}.b{b}"
            inner = ops.add(inner, _attend(inner, block_attn_params(params, f"{prefix}.attn", cfg), cfg))
            inner = ops.add(inner, _ffn(inner, params, f"{prefix}.ffn"))
        feat = ops.add(feat, _conv(inner, params, f"g{g}.conv"))
    return _conv(feat, params, "deep")


def restore_head(feat: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    return pixel_shuffle_upsample(_conv(feat, params, "head"), cfg.scale)


def forward(img, cfg: ModelConfig, params: Params) -> Tensor:
    img = as_tensor(img)
    if img.ndim != 3 or img.shape[2] != cfg.in_channels:
        raise ValueError(f"expected an H x W x {cfg.in_channels} image, got {img.shape}")
    cfg.check_input(img.shape[0], img.shape[1])
    f0 = _conv(img, params, "shallow")
    f1 = deep_features(f0, params, cfg)
    return restore_head(ops.add(f0, f1), params, cfg)


def model_margin(cfg: ModelConfig, offset_reach: int = 0) -> Margin:
    """Border band of the whole network under the serial/parallel margin rules."""
    conv = conv_margin(CONV_K)
    if cfg.attention == "tea":
        attn = adaptive_margin(cfg.spec, offset_reach).alongside(GLOBAL)
    elif cfg.attention == "skv":
        attn = sliding_margin(cfg.spec)
    else:
        attn = GLOBAL  # fixed block grid
    block = attn  # FFN is per-pixel; residual adds are parallel with identity
    group = Margin(0)
    for _ in range(cfg.n_blocks):
        group = group.then(block)
    group = group.then(conv)
    total = conv
    for _ in range(cfg.n_groups):
        total = total.then(group)
    return total.then(conv).then(conv)


def measure_offset_reach(img, cfg: ModelConfig, params: Params) -> int:
    """Largest offset reach over every TEA block, measured on the activations ``img`` produces."""
    if cfg.attention != "tea":
        return 0
    with no_grad():
        feat = _conv(as_tensor(img), params, "shallow")
        reach = 0
        for g in range(cfg.n_groups):
            inner = feat
            for b in range(cfg.n_blocks):
                prefix = f"g{g}.b{b}"
                p = block_attn_params(params, f"{prefix}.attn", cfg)
                reach = max(reach, offset_reach(inner.data, p, cfg.spec))
                inner = ops.add(inner, _attend(inner, p, cfg))
                inner = ops.add(inner, _ffn(inner, params, f"{prefix}.ffn"))
            feat = ops.add(feat, _conv(inner, params, f"g{g}.conv"))
    return reach


def model_operator(cfg: ModelConfig, params: Params, offset_reach: int = 0) -> Operator:
    return Operator(
        lambda x: forward(Tensor(x), cfg, params),
        model_margin(cfg, offset_reach),
        f"model[{cfg.attention}]",
        cfg.scale,
    )
