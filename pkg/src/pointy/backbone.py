"""Hierarchical point transformer: blocks, token merging, head, accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .embed import ACTIVATIONS, EmbedParams, embed_patches
from .geometry import PatchSet, PointCloud, patchify
from .numerics import (
    LayerNormLayer,
    LinearLayer,
    Tensor,
    dropout,
    layer_norm,
    linear_forward,
    make_rng,
    matmul,
    mean,
    pad_axis,
    reshape,
    resolve_dtype,
    softmax,
    sum_,
    swap_last,
    transpose,
)

MERGE_STRATEGIES = ("addition", "linear")


@dataclass(frozen=True)
class ModelConfig:
    D: int = 192
    H: int = 64
    L: int = 6
    P: int = 64
    k: int = 32
    n_points: int = 2048
    merge_schedule: tuple[int, ...] = (2, 2, 2, 2, 2, 1)
    merge_strategy: str = "addition"
    hierarchical: bool = True
    activation: str = "gelu"
    use_positional: bool = True
    positional: str = "mlp"  # "mlp" | "table"
    mlp_ratio: int = 4
    num_classes: int = 40
    embed_hidden: int = 64
    use_extras: bool = False
    fps_start: str = "centroid"
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "merge_schedule", tuple(int(f) for f in self.merge_schedule))
        if self.D % self.H:
            raise ValueError(f"D={self.D} is not divisible by H={self.H}")
        if len(self.merge_schedule) != self.L:
            raise ValueError(f"merge_schedule has {len(self.merge_schedule)} entries for L={self.L} blocks")
        if any(f < 1 for f in self.merge_schedule):
            raise ValueError("merge factors must be >= 1")
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise ValueError(f"merge_strategy must be one of {MERGE_STRATEGIES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.k > self.n_points or self.P > self.n_points:
            raise ValueError("P and k cannot exceed n_points")

    @property
    def head_dim(self) -> int:
        return self.D // self.H

    @property
    def schedule(self) -> tuple[int, ...]:
        """Merge factors actually applied (all ones when not hierarchical)."""
        return self.merge_schedule if self.hierarchical else (1,) * self.L

    @property
    def in_features(self) -> int:
        return 9 if self.use_extras else 6

    def token_counts(self) -> list[int]:
        """Token count entering the network and after each block."""
        counts = [self.P]
        for f in self.schedule:
            counts.append(math.ceil(counts[-1] / f))
        return counts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["merge_schedule"] = list(self.merge_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {"small": dict(D=192, H=64), "base": dict(D=510, H=170)}


def preset(name: str, **overrides) -> ModelConfig:
    """``small`` (D=192, H=64) or ``base`` (D=510, H=170); both use head dim 3."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = ModelConfig(**{**base, **overrides})
    if "D" not in overrides and "H" not in overrides:
        assert cfg.D // cfg.H == 3 and cfg.D % cfg.H == 0
    return cfg


@dataclass
class BlockParams:
    ln1: LayerNormLayer
    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    o: LinearLayer
    ln2: LayerNormLayer
    fc1: LinearLayer
    fc2: LinearLayer

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("ln1", "q", "k", "v", "o", "ln2", "fc1", "fc2"):
            for key, t in getattr(self, name).parameters().items():
                out[f"{name}.{key}"] = t
        return out


@dataclass
class ModelParams:
    embed: EmbedParams
    blocks: list[BlockParams]
    merges: list[LinearLayer | None]
    head_norm: LayerNormLayer
    head: LinearLayer

    def parameters(self) -> dict[str, Tensor]:
        """All learned tensors under stable dotted names."""
        out = {f"embed.{k}": t for k, t in self.embed.parameters().items()}
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": t for k, t in block.parameters().items()})
        for i, merge in enumerate(self.merges):
            if merge is not None:
                out.update({f"merges.{i}.{k}": t for k, t in merge.parameters().items()})
        out.update({f"head_norm.{k}": t for k, t in self.head_norm.parameters().items()})
        out.update({f"head.{k}": t for k, t in self.head.parameters().items()})
        return out

    @property
    def dtype(self):
        return self.head.weight.dtype


def init_params(config: ModelConfig, seed: int = 0, precision="f32") -> ModelParams:
    """Kaiming-initialised weights, zero biases, unit/zero LayerNorm."""
    dtype = resolve_dtype(precision)
    rng = make_rng(seed, 0)
    D = config.D
    positional = config.positional if config.use_positional else None
    embed = EmbedParams.create(D, rng, config.embed_hidden, config.in_features, positional, config.P, dtype)
    blocks = []
    for _ in range(config.L):
        blocks.append(BlockParams(
            ln1=LayerNormLayer.create(D, dtype, config.ln_eps),
            q=LinearLayer.create(D, D, rng, dtype),
            k=LinearLayer.create(D, D, rng, dtype),
            v=LinearLayer.create(D, D, rng, dtype),
            o=LinearLayer.create(D, D, rng, dtype),
            ln2=LayerNormLayer.create(D, dtype, config.ln_eps),
            fc1=LinearLayer.create(D, config.mlp_ratio * D, rng, dtype),
            fc2=LinearLayer.create(config.mlp_ratio * D, D, rng, dtype),
        ))
    merges: list[LinearLayer | None] = []
    for f in config.schedule:
        if config.merge_strategy == "linear" and f > 1:
            merges.append(LinearLayer.create(f * D, D, rng, dtype))
        else:
            merges.append(None)
    head_norm = LayerNormLayer.create(D, dtype, config.ln_eps)
    head = LinearLayer.create(D, config.num_classes, rng, dtype)
    return ModelParams(embed, blocks, merges, head_norm, head)


def load_param_arrays(params: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    """Copy named arrays into ``params`` in place, checking names and shapes."""
    named = params.parameters()
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in named.items():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)


# blocks --------------------------------------------------------------------

def multi_head_attention(x: Tensor, block: BlockParams, heads: int) -> Tensor:
    *lead, T, D = x.shape
    dh = D // heads

    def split(t):
        return transpose(reshape(t, (*lead, T, heads, dh)), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    q = split(linear_forward(x, block.q))
    k = split(linear_forward(x, block.k))
    v = split(linear_forward(x, block.v))
    weights = softmax(matmul(q, swap_last(k)) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = matmul(weights, v)  # (..., H, T, dh)
    n = len(lead)
    ctx = reshape(transpose(ctx, (*range(n), n + 1, n, n + 2)), (*lead, T, D))
    return linear_forward(ctx, block.o)


def attention_block(tokens: Tensor, block: BlockParams, config: ModelConfig,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm block: x + MHA(LN x), then x + MLP(LN x)."""
    if tokens.shape[-1] % config.H:
        raise ValueError(f"D={tokens.shape[-1]} not divisible by H={config.H}")
    act = ACTIVATIONS[config.activation]
    x = tokens + dropout(multi_head_attention(layer_norm(tokens, block.ln1), block, config.H),
                         config.dropout, rng)
    h = linear_forward(act(linear_forward(layer_norm(x, block.ln2), block.fc1)), block.fc2)
    return x + dropout(h, config.dropout, rng)


def token_merge(tokens: Tensor, factor: int, strategy: str = "addition",
                merge: LinearLayer | None = None) -> Tensor:
    """Combine consecutive runs of ``factor`` tokens along the token axis.

    The token axis is the second to last. A short trailing run is zero padded,
    so with addition it is summed as it stands (a lone token passes through)
    and with the linear strategy its padded concatenation is projected.
    """
    if factor < 1:
        raise ValueError("merge factor must be >= 1")
    if factor == 1:
        return tokens
    *lead, T, D = tokens.shape
    groups = -(-T // factor)
    padded = pad_axis(tokens, -2, groups * factor - T)
    if strategy == "addition":
        return sum_(reshape(padded, (*lead, groups, factor, D)), axis=-2)
    if strategy == "linear":
        if merge is None:
            raise ValueError("linear merging needs its projection parameters")
        return linear_forward(reshape(padded, (*lead, groups, factor * D)), merge)
    raise ValueError(f"unknown merge strategy {strategy!r}")


def forward_tokens(tokens: Tensor, params: ModelParams, config: ModelConfig,
                   rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Run the blocks and head on (…, P, D) tokens."""
    x = tokens
    for block, factor, merge in zip(params.blocks, config.schedule, params.merges):
        x = attention_block(x, block, config, rng)
        x = token_merge(x, factor, config.merge_strategy, merge)
    pooled = mean(x, axis=-2)
    logits = linear_forward(layer_norm(pooled, params.head_norm), params.head)
    return {"tokens": x, "pooled": pooled, "logits": logits}


def stack_patches(patch_sets: list[PatchSet]) -> dict[str, np.ndarray]:
    out = {
        "relative": np.stack([p.relative for p in patch_sets]),
        "absolute": np.stack([p.absolute for p in patch_sets]),
        "anchors": np.stack([p.anchors for p in patch_sets]),
    }
    if all(p.extras is not None for p in patch_sets):
        out["extras"] = np.stack([p.extras for p in patch_sets])
    return out


def forward_patches(patches: PatchSet | list[PatchSet], params: ModelParams, config: ModelConfig,
                    rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Forward from precomputed patch sets; a list is run as one batch."""
    batch = stack_patches(patches if isinstance(patches, list) else [patches])
    extras = batch.get("extras") if config.use_extras else None
    if config.use_extras and extras is None:
        raise ValueError("config.use_extras is set but the patches carry no extras")
    tokens = embed_patches(batch["relative"], batch["absolute"], batch["anchors"], params.embed,
                           config.use_positional, config.activation, extras)
    out = forward_tokens(tokens, params, config, rng)
    if not isinstance(patches, list):
        out = {key: _squeeze0(t) for key, t in out.items()}
    return out


def _squeeze0(t: Tensor) -> Tensor:
    return reshape(t, t.shape[1:])


def forward(cloud: PointCloud, params: ModelParams, config: ModelConfig) -> dict[str, Tensor]:
    """tokenize -> L x (block, merge) -> mean pool -> LayerNorm -> linear head.

    Returns the final token matrix (P', D), the pooled D-vector and the logits.
    """
    patches = patchify(cloud, config.P, config.k, fps_start=config.fps_start)
    return forward_patches(patches, params, config)


# accounting ----------------------------------------------------------------

@dataclass
class CountReport:
    total: int
    items: dict[str, int] = field(default_factory=dict)

    def __int__(self) -> int:
        return self.total

    def lines(self) -> list[str]:
        width = max(len(k) for k in self.items)
        rows = [f"{name:<{width}}  {value:>16,d}" for name, value in self.items.items()]
        rows.append(f"{'total':<{width}}  {self.total:>16,d}")
        return rows


def _lin(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def count_params(config: ModelConfig) -> CountReport:
    """Exact number of learned scalars, itemised by component."""
    D, h = config.D, config.embed_hidden
    items = {
        "embed.point_mlp": _lin(config.in_features, h) + _lin(h, D),
        "embed.residual_proj": _lin(3, D),
    }
    if config.use_positional:
        items["embed.positional"] = _lin(3, D) + _lin(D, D) if config.positional == "mlp" else config.P * D
    per_block_attn = 4 * _lin(D, D)
    per_block_mlp = _lin(D, config.mlp_ratio * D) + _lin(config.mlp_ratio * D, D)
    items["blocks.layer_norm"] = config.L * 4 * D
    items["blocks.attention"] = config.L * per_block_attn
    items["blocks.mlp"] = config.L * per_block_mlp
    if config.merge_strategy == "linear":
        items["merges"] = sum(_lin(f * D, D) for f in config.schedule if f > 1)
    items["head"] = 2 * D + _lin(D, config.num_classes)
    return CountReport(sum(items.values()), items)


DISTANCE_FLOPS = 8  # 3 sub + 3 mul + 2 add per squared distance


def count_flops(config: ModelConfig, n_points: int | None = None) -> CountReport:
    """Analytic FLOPs for one cloud, 2*m*n*k per (m x n)(n x k) product.

    Elementwise work (activations, norms, softmax, bias adds) is not counted.
    """
    N = config.n_points if n_points is None else n_points
    D, P, k = config.D, config.P, config.k
    rows = P * k
    items = {
        "fps": P * N * DISTANCE_FLOPS,
        "knn": P * N * DISTANCE_FLOPS,
        "embed.point_mlp": 2 * rows * config.in_features * config.embed_hidden + 2 * rows * config.embed_hidden * D,
        "embed.residual_proj": 2 * P * 3 * D,
    }
    if config.use_positional and config.positional == "mlp":
        items["embed.positional"] = 2 * P * 3 * D + 2 * P * D * D
    attn = mlp = merge = 0
    T = P
    for f in config.schedule:
        attn += 4 * 2 * T * D * D + 2 * 2 * T * T * D
        mlp += 2 * 2 * T * D * config.mlp_ratio * D
        groups = -(-T // f)
        if config.merge_strategy == "linear" and f > 1:
            merge += 2 * groups * f * D * D
        T = groups
    items["blocks.attention"] = attn
    items["blocks.mlp"] = mlp
    if merge:
        items["merges"] = merge
    items["head"] = 2 * D * config.num_classes
    return CountReport(sum(items.values()), items)


def linear_flops(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
