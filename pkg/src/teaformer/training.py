"""Desk-scale training: synthetic patches, L1 loss, plain SGD.

Everything random flows from one seed through ``numpy.random.default_rng``
(PCG64), split into independent child streams for initialisation and data, so
a ``(config, seed)`` pair always yields the same loss curve bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .attention import SlideSpec
from .model import ModelConfig, Params, forward, init_params
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)

RNG_NAME = "numpy.PCG64"
TASKS = ("denoise", "identity")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"loss became non-finite at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


def synthetic_images(rng: np.random.Generator, n: int, size: int, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth test images in ``[0, 1]``: a blurry colour field plus a few flat rectangles."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = np.empty((n, size, size, channels))
    for i in range(n):
        img = np.zeros((size, size, channels))
        for _ in range(4):
            cy, cx = rng.uniform(0, 1, 2)
            width = rng.uniform(0.1, 0.4)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += blob[..., None] * rng.uniform(-0.5, 0.5, channels)
        for _ in range(3):
            r0, c0 = rng.integers(0, size - 2, 2)
            r1 = r0 + rng.integers(2, max(3, size // 2))
            c1 = c0 + rng.integers(2, max(3, size // 2))
            img[r0:r1, c0:c1] = rng.uniform(0, 1, channels)
        images[i] = np.clip(img + 0.5, 0.0, 1.0)
    return images


@dataclass
class ToyData:
    """A fixed pool of clean images sampled with random cyclic shifts."""

    images: np.ndarray
    task: str = "denoise"
    noise_sigma: float = 0.1

    def batch(self, rng: np.random.Generator, size: int) -> list[tuple[np.ndarray, np.ndarray]]:
        pairs = []
        side = self.images.shape[1]
        for _ in range(size):
            clean = self.images[rng.integers(len(self.images))]
            dy, dx = rng.integers(0, side, 2)
            clean = np.roll(clean, (int(dy), int(dx)), axis=(0, 1))
            if self.task == "denoise":
                noisy = clean + rng.normal(0.0, self.noise_sigma, clean.shape)
            else:
                noisy = clean
            pairs.append((noisy, clean))
        return pairs


def desk_config(attention: str = "tea", embed_dim: int = 8) -> ModelConfig:
    """Reduced model for the WA-vs-TEA convergence comparison on 16 x 16 patches.

    One group of two blocks with ``D = 8`` keeps ten 500-step runs within a
    few minutes on one core. The WA variant uses 8 x 8 blocks.
    """
    return ModelConfig(
        embed_dim=embed_dim, n_groups=1, n_blocks=2, spec=SlideSpec(5, 2, 3, 4),
        attention=attention, window=8,
    )


def make_data(seed: int, patch: int, task: str = "denoise", pool: int = 16, noise_sigma: float = 0.1) -> ToyData:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    rng = np.random.default_rng([seed, 1])
    return ToyData(synthetic_images(rng, pool, patch), task, noise_sigma)


@dataclass
class TrainResult:
    config: ModelConfig
    params: Params
    losses: list[float] = field(default_factory=list)

    def final_loss(self, window: int = 50) -> float:
        """Mean training loss over the last ``window`` steps."""
        tail = self.losses[-window:]
        return float(np.mean(tail))

    def curve_text(self) -> str:
        return "".join(f"{i} {loss!r}\n" for i, loss in enumerate(self.losses))


def batch_loss(cfg: ModelConfig, params: Params, pairs) -> Tensor:
    total = None
    for noisy, clean in pairs:
        loss = ops.l1_loss(forward(Tensor(noisy), cfg, params), clean)
        total = loss if total is None else ops.add(total, loss)
    return ops.mul(total, 1.0 / len(pairs))


def sgd_step(params: Params, lr: float) -> Params:
    updated = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        updated[name] = Tensor(p.data - lr * g, requires_grad=True, name=name)
    return updated


def train_toy(
    cfg: ModelConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    data: Optional[ToyData] = None,
    patch: int = 16,
    batch_size: int = 2,
    params: Optional[Params] = None,
    task: str = "denoise",
    zero_deep: bool = False,
) -> TrainResult:
    """Plain gradient descent on L1 loss; returns the per-step loss curve.

    ``zero_deep`` starts the deep branch at zero so the network begins as a
    plain shallow-conv/head-conv chain.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    init_rng = np.random.default_rng([seed, 0])
    batch_rng = np.random.default_rng([seed, 2])
    data = make_data(seed, patch, task) if data is None else data
    params = init_params(cfg, init_rng, zero_deep=zero_deep) if params is None else params
    result = TrainResult(cfg, params)
    for step in range(steps):
        pairs = data.batch(batch_rng, batch_size)
        try:
            loss = batch_loss(cfg, params, pairs)
            loss.backward()
            params = sgd_step(params, lr)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        result.losses.append(float(loss.data))
        if step % 100 == 0:
            logger.debug("step %d loss %.6f", step, result.losses[-1])
    result.params = params
    return result
