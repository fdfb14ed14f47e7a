"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .functional import bce_with_logits
from .model import Model, ModelConfig, StageConfig, forward
from .tensor import Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-4
# entries whose gradient magnitude is below this are compared absolutely
ABS_FLOOR = 1e-7


def numeric_grad(f: Callable[[], float], param: Tensor, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``param``."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def micro_config(seed: int = 0) -> ModelConfig:
    """Two R2R blocks (one per stage), L=4, d=8, 1x8x8 input."""
    return ModelConfig(
        stages=[
            StageConfig(8, blocks=1, L=4, d=8, patch_stride=1, patch_kernel=3),
            StageConfig(8, blocks=1, L=4, d=8, patch_stride=2, patch_kernel=3),
        ],
        n_classes=3, input_channels=1, input_size=8, seed=seed,
    )


def param_group(name: str) -> str:
    if ".attn.mask_" in name:
        return "mask_branch"
    if ".attn.feat_" in name:
        return "feature_branch"
    if name.endswith(".attn.keys"):
        return "keys"
    if name.endswith(".attn.values"):
        return "values"
    if ".mlp." in name:
        return "mlp"
    if "norm" in name:
        return "layer_norm"
    if ".embed." in name:
        return "embedding"
    return "head"


def run_gradcheck(seed: int = 0, batch: int = 2, jitter: float = 0.3) -> dict[str, float]:
    """Compare analytic and central-difference gradients on the micro-model.

    All parameters are jittered away from their initial values so that the
    masks are not uniform and no gradient is trivially zero.  Returns the max
    relative error per parameter group.
    """
    rng = np.random.default_rng(seed)
    model = Model(micro_config(seed))
    params = model.parameters()
    for p in params.values():
        p.data = p.data + rng.normal(0.0, jitter, size=p.shape)
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, 8, 8)))
    y = (rng.random((batch, 3)) < 0.5).astype(np.float64)

    def loss_value() -> float:
        logits, _ = forward(model, x)
        return float(bce_with_logits(logits, y).data)

    model.zero_grad()
    logits, _ = forward(model, x)
    backward(bce_with_logits(logits, y))
    errors: dict[str, float] = {}
    for name, p in params.items():
        err = relative_error(p.grad, numeric_grad(loss_value, p))
        group = param_group(name)
        errors[group] = max(errors.get(group, 0.0), err)
    return dict(sorted(errors.items()))
