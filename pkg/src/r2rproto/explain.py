"""Mask explanations: activity ranking, heatmaps, overlays, localization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import R2RForwardTrace
from .data import write_image_pgm, write_image_ppm
from .errors import ContractError, DimensionError

ACTIVITY_MODES = ("mass", "argmax")


@dataclass
class ExplanationSet:
    stage: int
    block: int
    masks: np.ndarray  # [L, h, w]
    attn: np.ndarray  # [L, L]
    weighted_masks: np.ndarray  # [L, h, w]
    activity: np.ndarray  # [L]
    mode: str = "mass"

    @property
    def L(self) -> int:
        return self.masks.shape[0]


@dataclass
class ActiveMask:
    index: int
    activity: float
    heatmap: np.ndarray  # input resolution, min-max scaled to [0, 1]
    flat: bool = False


def mask_activity(wm: np.ndarray, mode: str = "mass") -> np.ndarray:
    """Per-mask activity of weighted masks ``[L, h, w]``.

    ``mass`` sums each weighted mask; ``argmax`` counts the pixels where a
    mask is the dominant one.
    """
    if mode == "mass":
        return wm.sum(axis=(-2, -1))
    if mode == "argmax":
        winner = wm.argmax(axis=0)
        return np.bincount(winner.reshape(-1), minlength=wm.shape[0]).astype(np.float64)
    raise ContractError(f"activity mode must be one of {ACTIVITY_MODES}, got {mode!r}")


def explanation_from_trace(trace: R2RForwardTrace, stage: int, block: int, index: int = 0,
                           mode: str = "mass") -> ExplanationSet:
    """Slice sample ``index`` out of a (possibly batched) trace."""
    m, attn, wm = trace.masks, trace.attn, trace.weighted_masks
    if m.ndim == 4:
        m, attn, wm = m[index], attn[index], wm[index]
    return ExplanationSet(stage, block, m, attn, wm, mask_activity(wm, mode), mode)


def explanations_for_model(model, traces, index: int = 0, mode: str = "mass") -> list[ExplanationSet]:
    keys = [(si, bi) for si, bi, _ in model.attention_layers()]
    return [explanation_from_trace(t, si, bi, index, mode) for (si, bi), t in zip(keys, traces)]


def upsample_bilinear(a: np.ndarray, size: int) -> np.ndarray:
    """Resize ``[h, w]`` to ``[size, size]`` with half-pixel-centred bilinear sampling."""
    h, w = a.shape

    def coords(n_src):
        src = (np.arange(size) + 0.5) * n_src / size - 0.5
        src = np.clip(src, 0, n_src - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def normalize_heatmap(a: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(a), True
    return (a - lo) / (hi - lo), False


def rank_masks(activity: np.ndarray) -> np.ndarray:
    """Indices by decreasing activity; equal activities keep ascending index order."""
    return np.argsort(-np.asarray(activity), kind="stable")


def select_active_masks(expl: ExplanationSet, k: int, size: int | None = None) -> list[ActiveMask]:
    """Top-``k`` masks by activity with heatmaps upsampled to ``size``."""
    if not 1 <= k <= expl.L:
        raise ContractError(f"k must be in [1, L={expl.L}], got {k}")
    size = size or expl.weighted_masks.shape[-1]
    out = []
    for i in rank_masks(expl.activity)[:k]:
        hm, flat = normalize_heatmap(upsample_bilinear(expl.weighted_masks[i], size))
        if flat:
            warnings.warn(f"weighted mask {i} of stage {expl.stage} block {expl.block} is flat", RuntimeWarning)
        out.append(ActiveMask(int(i), float(expl.activity[i]), hm, flat))
    return out


def colorize(heatmap: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) colormap, ``[h, w, 3]`` floats."""
    h = np.clip(heatmap, 0.0, 1.0)
    return np.stack([h, np.zeros_like(h), 1.0 - h], axis=-1)


def overlay_rgb(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.shape != heatmap.shape:
        raise DimensionError(f"overlay: image {img.shape} vs heatmap {heatmap.shape}")
    gray = np.repeat(np.clip(img, 0, 1)[..., None], 3, axis=-1)
    rgb = (1 - alpha) * gray + alpha * colorize(heatmap)
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def render_overlay(image, heatmap, path) -> tuple[Path, Path]:
    """Write the blended overlay as PPM at ``path`` and the raw heatmap as PGM beside it."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.min() < 0 or hm.max() > 1:
        raise ContractError("heatmap values must lie in [0, 1]")
    path = Path(path)
    rgb = overlay_rgb(image, hm)
    write_image_ppm(path, rgb)
    pgm = path.with_suffix(".pgm")
    write_image_pgm(pgm, hm)
    return path, pgm


def localization_eval(model, samples, block: int = -1, mode: str = "mass", batch_size: int = 64) -> dict:
    """Top-1 mask localization over samples carrying ground-truth regions.

    ``block`` indexes the flattened list of attention blocks (-1 = last block
    of the final stage).  The target region of a sample is the union of the
    footprints of all its positive classes.
    """
    from .data import batch_iterator, stack
    from .metrics import localization_score
    from .model import forward
    from .tensor import Tensor, no_grad

    layers = model.attention_layers()
    si, bi, _ = layers[block]
    scored = [s for s in samples if s.union_region() is not None and s.union_region().any()]
    if not scored:
        raise ContractError("no samples with ground-truth regions")
    size = model.config.input_size
    ious, hits = [], []
    with no_grad():
        for batch in batch_iterator(scored, batch_size, None):
            x, _ = stack(batch)
            _, traces = forward(model, Tensor(x), capture_traces=True)
            for i, s in enumerate(batch):
                expl = explanation_from_trace(traces[block], si, bi, i, mode)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    top = select_active_masks(expl, 1, size)[0]
                iou, hit = localization_score(top.heatmap, s.union_region())
                ious.append(iou)
                hits.append(hit)
    return {
        "n": len(ious),
        "mean_iou": float(np.mean(ious)),
        "iou_rate": float(np.mean(np.asarray(ious) >= 0.5)),
        "pointing_rate": float(np.mean(hits)),
    }
