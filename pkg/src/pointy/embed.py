"""Tokenizer-free patch embedding.

Each kNN patch becomes one token: a two-layer point MLP over per-neighbour
features (anchor-relative offset and absolute position), max-pooled over the
neighbours, plus a linear projection of the anchor position (the residual
path) and, optionally, a learned positional embedding of the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PatchSet, PointCloud, patchify
from .numerics import LinearLayer, Tensor, gelu, linear_forward, max_, relu

ACTIVATIONS = {"gelu": gelu, "relu": relu}


@dataclass
class EmbedParams:
    point1: LinearLayer  # features -> hidden
    point2: LinearLayer  # hidden -> D
    residual_proj: LinearLayer  # 3 -> D
    pos1: LinearLayer | None = None  # 3 -> D  (positional="mlp")
    pos2: LinearLayer | None = None  # D -> D
    pos_table: Tensor | None = None  # (P, D)  (positional="table")

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden: int = 64, in_features: int = 6,
               positional: str | None = "mlp", n_patches: int = 64, dtype=np.float64) -> EmbedParams:
        params = cls(
            point1=LinearLayer.create(in_features, hidden, rng, dtype),
            point2=LinearLayer.create(hidden, dim, rng, dtype),
            residual_proj=LinearLayer.create(3, dim, rng, dtype),
        )
        if positional == "mlp":
            params.pos1 = LinearLayer.create(3, dim, rng, dtype)
            params.pos2 = LinearLayer.create(dim, dim, rng, dtype)
        elif positional == "table":
            params.pos_table = Tensor(rng.normal(0.0, 0.02, size=(n_patches, dim)).astype(dtype),
                                      requires_grad=True)
        elif positional is not None:
            raise ValueError(f"unknown positional embedding {positional!r}")
        return params

    @property
    def dim(self) -> int:
        return self.point2.n_out

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("point1", "point2", "residual_proj", "pos1", "pos2"):
            layer = getattr(self, name)
            if layer is not None:
                for key, t in layer.parameters().items():
                    out[f"{name}.{key}"] = t
        if self.pos_table is not None:
            out["pos_table"] = self.pos_table
        return out


def patch_point_features(relative: np.ndarray, absolute: np.ndarray,
                         extras: np.ndarray | None = None) -> np.ndarray:
    """Per-neighbour input features ``[relative | absolute (| extras)]`` on the last axis."""
    parts = [relative, absolute] if extras is None else [relative, absolute, extras]
    return np.concatenate(parts, axis=-1)


def embed_patches(relative, absolute, anchors, params: EmbedParams, use_positional: bool = True,
                  activation: str = "gelu", extras=None) -> Tensor:
    """Token per patch: ``max_k point_mlp(f) + residual_proj(anchor) [+ pos(anchor)]``.

    Accepts a single patch set (P, k, 3) or a batch (B, P, k, 3); ``anchors``
    is (P, 3) or (B, P, 3) correspondingly. Returns (..., P, D).
    """
    act = ACTIVATIONS[activation]
    dtype = params.point1.weight.dtype
    feats = Tensor(patch_point_features(relative, absolute, extras).astype(dtype, copy=False))
    if feats.shape[-1] != params.point1.n_in:
        raise ValueError(f"point features have {feats.shape[-1]} channels, "
                         f"embedding expects {params.point1.n_in}")
    anchor_t = Tensor(np.asarray(anchors).astype(dtype, copy=False))
    h = act(linear_forward(feats, params.point1))
    h = linear_forward(h, params.point2)
    tokens = max_(h, axis=-2) + linear_forward(anchor_t, params.residual_proj)
    if use_positional:
        if params.pos1 is not None:
            tokens = tokens + linear_forward(act(linear_forward(anchor_t, params.pos1)), params.pos2)
        elif params.pos_table is not None:
            tokens = tokens + params.pos_table
    return tokens


def embed_patchset(patches: PatchSet, params: EmbedParams, use_positional: bool = True,
                   activation: str = "gelu") -> Tensor:
    extras = patches.extras if params.point1.n_in == 9 else None
    return embed_patches(patches.relative, patches.absolute, patches.anchors, params,
                         use_positional, activation, extras)


def tokenize(cloud: PointCloud, config, params: EmbedParams, rng=None) -> Tensor:
    """normalize -> fps(P) -> knn(k) -> embed, returning a (P, D) token matrix."""
    patches = patchify(cloud, config.P, config.k, fps_start=config.fps_start, rng=rng)
    return embed_patchset(patches, params, config.use_positional, config.activation)
