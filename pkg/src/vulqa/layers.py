"""Parameter containers: linear (with optional LoRA), layer norm, transformer block."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Parameter, Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters, submodules and lists of submodules are discovered in
    attribute insertion order; names are dotted paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def get_submodule(self, path: str) -> "Module":
        node = self
        for part in path.split("."):
            node = node[int(part)] if isinstance(node, list) else getattr(node, part, None)
            if node is None:
                raise ConfigError(f"no submodule {path!r}")
        if not isinstance(node, Module):
            raise ConfigError(f"{path!r} is not a module")
        return node

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32, bias: bool = True,
                 std: float = 0.02):
        self.weight = Parameter(_normal(rng, (out_dim, in_dim), std, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None
        self.lora_A: Parameter | None = None
        self.lora_B: Parameter | None = None
        self._lora_scale = 0.0
        self._lora_alpha = 0.0

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def has_lora(self) -> bool:
        return self.lora_A is not None

    @property
    def lora_rank(self) -> int:
        return 0 if self.lora_A is None else self.lora_A.shape[0]

    @property
    def lora_scale(self) -> float:
        return self._lora_scale

    def attach_lora(self, rank: int, alpha: float, rng) -> None:
        if self.has_lora:
            raise ConfigError("adapter already attached")
        if rank <= 0:
            raise ConfigError("LoRA rank must be positive")
        bound = 1.0 / math.sqrt(self.in_dim)
        dtype = self.weight.dtype
        self.lora_A = Parameter(rng.uniform(-bound, bound, (rank, self.in_dim)).astype(dtype))
        self.lora_B = Parameter(np.zeros((self.out_dim, rank), dtype=dtype))
        self._lora_alpha = float(alpha)
        self._lora_scale = float(alpha) / rank

    def merge_lora(self) -> None:
        if not self.has_lora:
            return
        delta = self._lora_scale * (self.lora_B.data.astype(np.float64) @ self.lora_A.data.astype(np.float64))
        self.weight.data = (self.weight.data.astype(np.float64) + delta).astype(self.weight.dtype)
        self.lora_A = self.lora_B = None
        self._lora_scale = self._lora_alpha = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            delta = nx.linear(nx.linear(x, self.lora_A), self.lora_B)
            y = nx.add(y, nx.scale(delta, self._lora_scale))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class SelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng, dtype, std: float, causal: bool):
        if dim % n_heads:
            raise ConfigError(f"dim {dim} not divisible by {n_heads} heads")
        self.wq = Linear(dim, dim, rng, dtype, std=std)
        self.wk = Linear(dim, dim, rng, dtype, std=std)
        self.wv = Linear(dim, dim, rng, dtype, std=std)
        self.wo = Linear(dim, dim, rng, dtype, std=std)
        self._n_heads = n_heads
        self._causal = causal

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        a = nx.attention(self.wq(x), self.wk(x), self.wv(x), n_heads=self._n_heads,
                         causal=self._causal, key_mask=key_mask)
        return self.wo(a)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype, std: float):
        self.fc1 = Linear(dim, hidden, rng, dtype, std=std)
        self.fc2 = Linear(hidden, dim, rng, dtype, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, rng, dtype=np.float32, causal: bool = True,
                 mlp_ratio: int = 4, std: float = 0.02):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, n_heads, rng, dtype, std, causal)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, dtype, std)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        x = nx.add(x, self.attn(self.ln1(x), key_mask))
        return nx.add(x, self.mlp(self.ln2(x)))
