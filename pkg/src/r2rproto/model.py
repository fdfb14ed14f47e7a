"""CvT-style multi-stage classifier with R2R attention in every block.

Each stage: strided conv token embedding + layer norm, then ``blocks``
pre-norm residual blocks ``x + attn(LN(x))`` and ``x + MLP(LN(x))``.
The head is layer norm, global average pooling and a linear layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .attention import R2RAttentionLayer, R2RForwardTrace
from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, matmul, reduce_mean, transpose

POOLING = ("sum", "normalized")


@dataclass
class StageConfig:
    embed_channels: int
    blocks: int = 1
    L: int = 16
    d: int | None = None
    patch_stride: int = 2
    patch_kernel: int = 3
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.d is None:
            self.d = self.embed_channels

    def validate(self, index: int) -> None:
        if self.blocks < 1:
            raise ConfigError(f"stage {index}: blocks must be >= 1, got {self.blocks}")
        if self.patch_stride < 1:
            raise ConfigError(f"stage {index}: patch_stride must be >= 1, got {self.patch_stride}")
        if self.L < 2:
            raise ConfigError(f"stage {index}: L must be >= 2, got {self.L}")
        if self.embed_channels < 1 or self.d < 1:
            raise ConfigError(f"stage {index}: channel widths must be positive")
        if self.patch_kernel < 1 or self.patch_kernel % 2 == 0:
            raise ConfigError(f"stage {index}: patch_kernel must be odd, got {self.patch_kernel}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"stage {index}: mlp_ratio must be positive")

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.embed_channels * self.mlp_ratio)))


@dataclass
class ModelConfig:
    stages: list[StageConfig] = field(default_factory=list)
    n_classes: int = 2
    input_channels: int = 1
    input_size: int = 64
    pooling: str = "sum"
    seed: int = 0

    @classmethod
    def desk_default(cls, n_classes: int = 2, seed: int = 0) -> "ModelConfig":
        return cls(
            stages=[
                StageConfig(16, blocks=1, L=8, patch_stride=4, patch_kernel=7),
                StageConfig(32, blocks=1, L=8, patch_stride=2, patch_kernel=3),
                StageConfig(64, blocks=2, L=8, patch_stride=1, patch_kernel=3),
            ],
            n_classes=n_classes,
            input_channels=1,
            input_size=64,
            seed=seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in d.pop("stages", [])]
        return cls(stages=stages, **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def spatial_sizes(self) -> list[int]:
        """Validate and return the token-grid side length after each stage."""
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.input_channels < 1 or self.input_size < 1:
            raise ConfigError("input_channels and input_size must be positive")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        sizes, n = [], self.input_size
        for i, s in enumerate(self.stages):
            s.validate(i)
            if n // s.patch_stride < 1:
                raise ConfigError(f"stage {i}: stride {s.patch_stride} leaves spatial size {n // s.patch_stride}")
            if n % s.patch_stride:
                raise ConfigError(f"stage {i}: spatial size {n} is not divisible by stride {s.patch_stride}")
            # same-padded odd kernels: (n - 1) // stride + 1 == n // stride when divisible
            n //= s.patch_stride
            sizes.append(n)
        return sizes


class Block:
    def __init__(self, rng: np.random.Generator, c: int, stage: StageConfig, normalize_pool: bool):
        p = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        h = stage.hidden
        self.norm1_gamma, self.norm1_beta = p(np.ones(c)), p(np.zeros(c))
        self.attn = R2RAttentionLayer.init(rng, c, stage.L, stage.d, normalize_pool=normalize_pool)
        self.norm2_gamma, self.norm2_beta = p(np.ones(c)), p(np.zeros(c))
        self.fc1_weight = p(rng.normal(0.0, 1.0 / np.sqrt(c), size=(h, c)))
        self.fc1_bias = p(np.zeros(h))
        self.fc2_weight = p(rng.normal(0.0, 1.0 / np.sqrt(h), size=(c, h)))
        self.fc2_bias = p(np.zeros(c))

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "norm1.gamma": self.norm1_gamma,
            "norm1.beta": self.norm1_beta,
        }
        out.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        out.update({
            "norm2.gamma": self.norm2_gamma,
            "norm2.beta": self.norm2_beta,
            "mlp.fc1.weight": self.fc1_weight,
            "mlp.fc1.bias": self.fc1_bias,
            "mlp.fc2.weight": self.fc2_weight,
            "mlp.fc2.bias": self.fc2_bias,
        })
        return out

    def __call__(self, x: Tensor, capture: bool):
        a, trace = self.attn(F.layer_norm(x, self.norm1_gamma, self.norm1_beta), capture)
        x = x + a
        h = F.layer_norm(x, self.norm2_gamma, self.norm2_beta)
        h = F.pointwise_conv2d(F.gelu(F.pointwise_conv2d(h, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)
        return x + h, trace


class Stage:
    def __init__(self, rng: np.random.Generator, c_in: int, cfg: StageConfig, normalize_pool: bool):
        c, k = cfg.embed_channels, cfg.patch_kernel
        self.cfg = cfg
        self.embed_weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c_in * k * k), size=(c, c_in, k, k)), requires_grad=True)
        self.embed_bias = Tensor(np.zeros(c), requires_grad=True)
        self.embed_gamma = Tensor(np.ones(c), requires_grad=True)
        self.embed_beta = Tensor(np.zeros(c), requires_grad=True)
        self.blocks = [Block(rng, c, cfg, normalize_pool) for _ in range(cfg.blocks)]

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "embed.weight": self.embed_weight,
            "embed.bias": self.embed_bias,
            "embed.norm.gamma": self.embed_gamma,
            "embed.norm.beta": self.embed_beta,
        }
        for i, b in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in b.parameters().items()})
        return out


class Model:
    """Built from a :class:`ModelConfig`; parameters are initialised from ``config.seed``."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.spatial = config.spatial_sizes()
        rng = np.random.default_rng(config.seed)
        normalize = config.pooling == "normalized"
        self.stages: list[Stage] = []
        c = config.input_channels
        for s in config.stages:
            self.stages.append(Stage(rng, c, s, normalize))
            c = s.embed_channels
        self.head_gamma = Tensor(np.ones(c), requires_grad=True)
        self.head_beta = Tensor(np.zeros(c), requires_grad=True)
        self.head_weight = Tensor(rng.normal(0.0, 0.02, size=(config.n_classes, c)), requires_grad=True)
        self.head_bias = Tensor(np.zeros(config.n_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        """Ordered ``name -> Tensor`` inventory; order and shapes depend only on the config."""
        out: dict[str, Tensor] = {}
        for i, s in enumerate(self.stages):
            out.update({f"stage{i}.{k}": v for k, v in s.parameters().items()})
        out.update({
            "head.norm.gamma": self.head_gamma,
            "head.norm.beta": self.head_beta,
            "head.weight": self.head_weight,
            "head.bias": self.head_bias,
        })
        return out

    def attention_layers(self) -> list[tuple[int, int, R2RAttentionLayer]]:
        return [(si, bi, b.attn) for si, s in enumerate(self.stages) for bi, b in enumerate(s.blocks)]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, x, capture_traces: bool = False):
        return forward(self, x, capture_traces)


def build(config: ModelConfig) -> Model:
    return Model(config)


def forward(model: Model, x, capture_traces: bool = False) -> tuple[Tensor, list[R2RForwardTrace] | None]:
    """Logits ``[n_classes]`` (or ``[B, n_classes]``) plus one trace per block if requested."""
    x = as_tensor(x)
    cfg = model.config
    expect = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim not in (3, 4) or tuple(x.shape[-3:]) != expect:
        raise DimensionError(f"model input must be {expect} (optionally batched), got {x.shape}")
    traces: list[R2RForwardTrace] | None = [] if capture_traces else None
    h = x
    for stage in model.stages:
        s = stage.cfg
        h = F.conv2d(h, stage.embed_weight, stage.embed_bias, stride=s.patch_stride, padding=s.patch_kernel // 2)
        h = F.layer_norm(h, stage.embed_gamma, stage.embed_beta)
        for block in stage.blocks:
            h, tr = block(h, capture_traces)
            if traces is not None:
                traces.append(tr)
    h = F.layer_norm(h, model.head_gamma, model.head_beta)
    pooled = reduce_mean(h, axes=(-2, -1))
    logits = matmul(pooled.reshape(-1, pooled.shape[-1]), transpose(model.head_weight)) + model.head_bias
    if x.ndim == 3:
        logits = logits.reshape(cfg.n_classes)
    return logits, traces
