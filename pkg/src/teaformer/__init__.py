"""Translation-equivariant sliding attention on a small numpy tensor core.

Submodules load on first attribute access, so ``teaformer.cli`` can set BLAS
thread limits before numpy is imported.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "no_grad": "tensor",
    "grad_check": "tensor",
    "NonFiniteError": "tensor",
    "MacCounter": "counting",
    "count_macs": "counting",
    "SlideSpec": "attention",
    "AttnParams": "attention",
    "SpecViolation": "attention",
    "self_attention": "attention",
    "skv_sa": "attention",
    "askv_sa": "attention",
    "dsa": "attention",
    "tea": "attention",
    "window_attention": "attention",
    "ShiftOp": "equivariance",
    "Margin": "equivariance",
    "audit": "equivariance",
    "EquivReport": "equivariance",
    "ModelConfig": "model",
    "forward": "model",
    "init_params": "model",
    "count_params": "model",
    "train_toy": "training",
    "analytic_cost": "cost",
    "measured_cost": "cost",
    "scaling_report": "cost",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
