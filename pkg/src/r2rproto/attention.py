"""Region-to-region prototype self-attention.

Pipeline for one block, input ``x`` of shape ``[c, h, w]`` (or batched):

    masks    m  = softmax_L(pointwise(x))            [L, h, w]
    features f  = depthwise_separable(x)             [d, h, w]
    queries  q  = sum_hw m * f                       [L, d]
    attn        = row_softmax(q @ keys.T / sqrt(d))  [L, L]
    weighted wm = attn @ m                           [L, h, w]
    output   o  = values @ wm                        [z, h, w]

Keys ``[L, d]`` and values ``[z, L]`` are free parameters; nothing about them
depends on the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, matmul, reshape, scale, softmax, transpose

POOL_EPS = 1e-6


@dataclass
class R2RForwardTrace:
    masks: np.ndarray
    features: np.ndarray
    queries: np.ndarray
    scores: np.ndarray
    attn: np.ndarray
    weighted_masks: np.ndarray
    output: np.ndarray


class R2RAttentionLayer:
    """Parameters of one interpretable attention block.

    ``mask_weight``/``mask_bias`` form the 1x1 mask branch (c_in -> L),
    ``feat_depthwise``/``feat_pointwise`` the depthwise-separable feature
    branch (c_in -> d).
    """

    def __init__(self, mask_weight, mask_bias, feat_depthwise, feat_pointwise, keys, values, normalize_pool=False):
        self.mask_weight = mask_weight
        self.mask_bias = mask_bias
        self.feat_depthwise = feat_depthwise
        self.feat_pointwise = feat_pointwise
        self.keys = keys
        self.values = values
        self.normalize_pool = normalize_pool
        L, d = keys.shape
        if L < 2 or d < 1 or values.shape[0] < 1:
            raise ContractError(f"need L >= 2, d >= 1, z >= 1; got L={L}, d={d}, z={values.shape[0]}")
        if values.shape[1] != L or mask_weight.shape[0] != L or mask_bias.shape != (L,):
            raise DimensionError(
                f"mask count disagrees: keys {keys.shape}, values {values.shape}, mask branch {mask_weight.shape}"
            )
        if feat_pointwise.shape[0] != d:
            raise DimensionError(f"feature branch width {feat_pointwise.shape[0]} != key width {d}")

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, L: int, d: int, z: int | None = None,
             kernel: int = 3, proto_std: float = 0.02, normalize_pool: bool = False) -> "R2RAttentionLayer":
        z = c_in if z is None else z
        p = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        return cls(
            mask_weight=p(np.zeros((L, c_in))),
            mask_bias=p(np.zeros(L)),
            feat_depthwise=p(rng.normal(0.0, 1.0 / kernel, size=(c_in, kernel, kernel))),
            feat_pointwise=p(rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(d, c_in))),
            keys=p(rng.normal(0.0, proto_std, size=(L, d))),
            values=p(rng.normal(0.0, proto_std, size=(z, L))),
            normalize_pool=normalize_pool,
        )

    @property
    def L(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    @property
    def z(self) -> int:
        return self.values.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "mask_weight": self.mask_weight,
            "mask_bias": self.mask_bias,
            "feat_depthwise": self.feat_depthwise,
            "feat_pointwise": self.feat_pointwise,
            "keys": self.keys,
            "values": self.values,
        }

    def __call__(self, x, capture_trace: bool = False):
        return forward(x, self, capture_trace)


def _flat(t: Tensor) -> Tensor:
    *lead, h, w = t.shape
    return reshape(t, (*lead, h * w))


def compute_masks(x, layer: R2RAttentionLayer) -> Tensor:
    logits = F.pointwise_conv2d(x, layer.mask_weight, layer.mask_bias)
    return softmax(logits, axis=-3)


def compute_features(x, layer: R2RAttentionLayer) -> Tensor:
    return F.depthwise_separable_conv2d(x, layer.feat_depthwise, layer.feat_pointwise, stride=1)


def masked_pool_queries(m, f, normalize: bool = False) -> Tensor:
    """q[i, c] = sum_hw m[i] * f[c]; optionally divided by the mask area."""
    m, f = as_tensor(m), as_tensor(f)
    if m.shape[-2:] != f.shape[-2:] or m.shape[:-3] != f.shape[:-3]:
        raise DimensionError(f"masked_pool_queries: masks {m.shape} vs features {f.shape}")
    q = matmul(_flat(m), transpose(_flat(f), _swap_last(f.ndim - 1)))
    if normalize:
        area = m.sum(axes=(-2, -1), keepdims=False)
        q = q / reshape(area + POOL_EPS, (*area.shape, 1))
    return q


def _swap_last(ndim: int) -> tuple[int, ...]:
    return (*range(ndim - 2), ndim - 1, ndim - 2)


def attention_scores(q, keys) -> Tensor:
    """Raw query/prototype-key correlations, ``q @ keys.T``."""
    q, keys = as_tensor(q), as_tensor(keys)
    if q.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"region_attention: query width {q.shape} vs key width {keys.shape}")
    return matmul(q, transpose(keys, _swap_last(keys.ndim)))


def region_attention(q, keys) -> Tensor:
    scores = attention_scores(q, keys)
    return softmax(scale(scores, 1.0 / np.sqrt(as_tensor(keys).shape[-1])), axis=-1)


def weight_masks(attn, m) -> Tensor:
    attn, m = as_tensor(attn), as_tensor(m)
    if attn.shape[-1] != m.shape[-3] or attn.shape[-2] != attn.shape[-1]:
        raise DimensionError(f"weight_masks: attn {attn.shape} vs masks {m.shape}")
    return reshape(matmul(attn, _flat(m)), m.shape)


def reconstruct_output(values, wm) -> Tensor:
    values, wm = as_tensor(values), as_tensor(wm)
    if values.shape[-1] != wm.shape[-3]:
        raise DimensionError(f"reconstruct_output: values {values.shape} vs weighted masks {wm.shape}")
    *lead, L, h, w = wm.shape
    return reshape(matmul(values, _flat(wm)), (*lead, values.shape[0], h, w))


def forward(x, layer: R2RAttentionLayer, capture_trace: bool = False):
    """Run one block; returns ``(o, trace)`` where ``trace`` is None unless requested."""
    x = as_tensor(x)
    m = compute_masks(x, layer)
    f = compute_features(x, layer)
    q = masked_pool_queries(m, f, layer.normalize_pool)
    scores = attention_scores(q, layer.keys)
    attn = softmax(scale(scores, 1.0 / np.sqrt(layer.d)), axis=-1)
    wm = weight_masks(attn, m)
    o = reconstruct_output(layer.values, wm)
    trace = None
    if capture_trace:
        trace = R2RForwardTrace(
            masks=m.data, features=f.data, queries=q.data, scores=scores.data,
            attn=attn.data, weighted_masks=wm.data, output=o.data,
        )
    return o, trace
