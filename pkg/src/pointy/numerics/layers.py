"""Parameter containers, Kaiming initialisation and the seeded generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, layer_norm as _layer_norm, linear as _linear

DTYPES = {"f32": np.float32, "f64": np.float64}


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox-4x64 generator keyed by ``seed`` and an optional stream path.

    Philox is counter based, so a given (seed, stream) produces the same
    sequence on every platform numpy supports.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}") from None
    return np.dtype(precision)


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Draw weights from N(0, sqrt(2 / fan_in))."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


@dataclass
class LinearLayer:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64) -> LinearLayer:
        weight = kaiming_init((n_out, n_in), n_in, rng, dtype)
        bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        return cls(weight, bias)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class LayerNormLayer:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, dtype=np.float64, eps: float = 1e-5) -> LayerNormLayer:
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(dim, dtype=dtype), requires_grad=True), eps)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    return _linear(x, layer.weight, layer.bias)


def layer_norm(x: Tensor, layer: LayerNormLayer) -> Tensor:
    return _layer_norm(x, layer.gamma, layer.beta, layer.eps)
