"""Pre-norm transformer encoder with dilated attention and mean pooling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .attention import AttentionWeights, DilationSchedule, multihead_dilated_attention, schedule_for_tokens
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError
from .image import PatchEmbedder, PatchSequence, PosEmbedTable
from .tensor import Tensor, add, gelu, layer_norm, linear, mean_axis, reshape, scale

LN_EPS = 1e-6
VIT_S_PARAMS = 21.9e6


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    hidden: int = 384
    ffn: int = 1536
    heads: int = 16
    drop_path: float = 0.1
    patch_size: int = 32
    pos_grid: tuple[int, int] = (32, 32)
    channels: int = 3
    num_outputs: int = 2
    schedule: DilationSchedule | None = None  # None: pick by sequence length
    schedule_policy: str = "table"
    init_std: float | None = 0.02  # None: 1/sqrt(fan_in) per matrix
    zero_init_residual: bool = True  # attention/FFN output projections start at zero

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError("drop_path must lie in [0, 1)")

    @classmethod
    def paper(cls, **overrides) -> "EncoderConfig":
        return replace(cls(), **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        base = cls(layers=2, hidden=32, ffn=128, heads=4, pos_grid=(16, 16), init_std=None,
                   zero_init_residual=False)
        return replace(base, **overrides)

    def schedule_for(self, n: int) -> DilationSchedule:
        return self.schedule if self.schedule is not None else schedule_for_tokens(n, self.schedule_policy)

    def drop_rate(self, layer: int) -> float:
        if self.layers == 1:
            return self.drop_path
        return self.drop_path * layer / (self.layers - 1)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden, config.ffn
    patch_dim = config.channels * config.patch_size**2
    shapes = {
        "embed.weight": (patch_dim, d),
        "embed.bias": (d,),
        "pos_embed": (config.pos_grid[0] * config.pos_grid[1], d),
        "norm.weight": (d,),
        "norm.bias": (d,),
        "head.weight": (d, config.num_outputs),
        "head.bias": (config.num_outputs,),
    }
    for i in range(config.layers):
        p = f"blocks.{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "fc1.weight"] = (d, f)
        shapes[p + "fc1.bias"] = (f,)
        shapes[p + "fc2.weight"] = (f, d)
        shapes[p + "fc2.bias"] = (d,)
    return shapes


def param_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _is_paper_shape(config: EncoderConfig) -> bool:
    return (config.layers, config.hidden, config.ffn, config.heads, config.patch_size) == (12, 384, 1536, 16, 32)


@dataclass
class LayerWeights:
    attn: AttentionWeights
    norm1: tuple[Tensor, Tensor]
    norm2: tuple[Tensor, Tensor]
    fc1: tuple[Tensor, Tensor]
    fc2: tuple[Tensor, Tensor]


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def layer(self, i: int) -> LayerWeights:
        p = f"blocks.{i}."
        g = self.params
        attn = AttentionWeights(
            g[p + "attn.q.weight"], g[p + "attn.q.bias"], g[p + "attn.k.weight"], g[p + "attn.k.bias"],
            g[p + "attn.v.weight"], g[p + "attn.v.bias"], g[p + "attn.o.weight"], g[p + "attn.o.bias"],
            self.config.heads)
        return LayerWeights(attn, (g[p + "norm1.weight"], g[p + "norm1.bias"]),
                            (g[p + "norm2.weight"], g[p + "norm2.bias"]),
                            (g[p + "fc1.weight"], g[p + "fc1.bias"]), (g[p + "fc2.weight"], g[p + "fc2.bias"]))

    @property
    def embedder(self) -> PatchEmbedder:
        pos = PosEmbedTable(self.params["pos_embed"], self.config.pos_grid)
        return PatchEmbedder(self.params["embed.weight"], self.params["embed.bias"], pos, self.config.patch_size)

    def requires_grad_(self, flag: bool = True) -> "EncoderWeights":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: Tensor(v.data.copy(), v.requires_grad, k)
                                            for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].data.ravel() for k in sorted(self.params)])

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path: str | Path, config: EncoderConfig) -> "EncoderWeights":
        arrays = load_checkpoint(path)
        shapes = param_shapes(config)
        missing = sorted(set(shapes) - set(arrays))
        if missing:
            raise DimensionError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
        params = {}
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape}, expected {shape}")
            params[name] = Tensor(arrays[name], name=name)
        return cls(config, params)


def init_weights(config: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """Truncated-normal (two-sigma) matrices, zero biases, unit norm gains.

    Matrices use ``config.init_std``, or ``1/sqrt(fan_in)`` when it is None;
    the positional table always uses 0.02.  With ``zero_init_residual`` the
    attention and FFN output projections start at zero, so every block is
    the identity at initialisation.
    """
    if _is_paper_shape(config):
        n = param_count(config)
        if abs(n - VIT_S_PARAMS) > 0.05 * VIT_S_PARAMS:
            raise ConfigError(f"paper-shaped encoder has {n} parameters, expected about 21.9M")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            arr = np.ones(shape)
        elif len(shape) == 1 or (config.zero_init_residual and name.endswith(("attn.o.weight", "fc2.weight"))):
            arr = np.zeros(shape)
        else:
            std = config.init_std
            if std is None or name == "pos_embed":
                std = 0.02 if name == "pos_embed" else 1.0 / np.sqrt(shape[0])
            arr = std * truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
        params[name] = Tensor(arr, name=name)
    return EncoderWeights(config, params)


def drop_path(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Drop the whole residual branch of one sample with probability ``rate``."""
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    return scale(x, (1.0 / keep) if rng.random() < keep else 0.0)


def block_forward(x: Tensor, weights: EncoderWeights, layer: int, schedule: DilationSchedule,
                  train: bool = False, rng: np.random.Generator | None = None, threads: int = 1) -> Tensor:
    lw = weights.layer(layer)
    rate = weights.config.drop_rate(layer)
    h = layer_norm(x, *lw.norm1, eps=LN_EPS)
    x = add(x, drop_path(multihead_dilated_attention(h, lw.attn, schedule, threads=threads), rate, train, rng))
    h = layer_norm(x, *lw.norm2, eps=LN_EPS)
    h = linear(gelu(linear(h, *lw.fc1)), *lw.fc2)
    return add(x, drop_path(h, rate, train, rng))


def encode(seq: PatchSequence | Tensor, weights: EncoderWeights, train: bool = False,
           rng: np.random.Generator | None = None, schedule: DilationSchedule | None = None,
           threads: int = 1) -> tuple[Tensor, Tensor]:
    """Run all blocks and the final norm; returns ``(tokens, pooled)``."""
    x = seq.embeddings if isinstance(seq, PatchSequence) else seq
    cfg = weights.config
    if x.ndim != 2 or x.shape[1] != cfg.hidden:
        raise DimensionError(f"expected (N, {cfg.hidden}) tokens, got {x.shape}")
    if train and cfg.drop_path > 0 and rng is None:
        raise ConfigError("training with drop path needs an rng")
    schedule = schedule or cfg.schedule_for(x.shape[0])
    for i in range(cfg.layers):
        x = block_forward(x, weights, i, schedule, train, rng, threads)
    tokens = layer_norm(x, weights["norm.weight"], weights["norm.bias"], eps=LN_EPS)
    return tokens, mean_axis(tokens, 0)


def head_logits(pooled: Tensor, weights: EncoderWeights) -> Tensor:
    """Class or hazard logits from the pooled vector, shape ``(num_outputs,)``."""
    row = reshape(pooled, (1, pooled.shape[0]))
    out = linear(row, weights["head.weight"], weights["head.bias"])
    return reshape(out, (out.shape[1],))
