"""Small layer library over the autograd tensors.

Parameters are initialized from a generator keyed by (seed, parameter name),
so two models that share a sub-module name start with identical weights for
it regardless of what else they contain.
"""
from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, attention, concat, gelu, layer_norm, linear, parameter, swish


class Init:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def kaiming_uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        # kaiming-uniform with a = sqrt(5): bound = 1/sqrt(fan_in)
        bound = 1.0 / math.sqrt(fan_in)
        return parameter(self.rng(name).uniform(-bound, bound, size=shape), name=name)

    def normal(self, name: str, shape: tuple, std: float) -> Tensor:
        return parameter(self.rng(name).normal(0.0, std, size=shape), name=name)

    @staticmethod
    def zeros(name: str, shape: tuple) -> Tensor:
        return parameter(np.zeros(shape), name=name)

    @staticmethod
    def ones(name: str, shape: tuple) -> Tensor:
        return parameter(np.ones(shape), name=name)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield (val.name or prefix + key), val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=p.data.dtype)
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
                p.data[...] = arr

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


class Linear(Module):
    def __init__(self, init: Init, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = init.kaiming_uniform(f"{name}.weight", (d_in, d_out), d_in)
        self.bias = init.zeros(f"{name}.bias", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, name: str, dim: int, eps: float = 1e-9):
        self.gamma = init.ones(f"{name}.gamma", (dim,))
        self.beta = init.zeros(f"{name}.beta", (dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two-layer perceptron."""

    def __init__(self, init: Init, name: str, d_in: int, d_hidden: int, d_out: int,
                 activation: str = "gelu"):
        self.fc1 = Linear(init, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(init, f"{name}.fc2", d_hidden, d_out)
        if activation not in ("gelu", "swish"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = gelu if self.activation == "gelu" else swish
        return self.fc2(act(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention; keys/values may come from a different sequence."""

    def __init__(self, init: Init, name: str, d_model: int, n_heads: int,
                 d_head: int | None = None, d_kv: int | None = None):
        d_head = d_head or d_model // n_heads
        d_kv = d_kv or d_model
        self.n_heads, self.d_head = n_heads, d_head
        inner = n_heads * d_head
        self.q = Linear(init, f"{name}.q", d_model, inner)
        self.k = Linear(init, f"{name}.k", d_kv, inner)
        self.v = Linear(init, f"{name}.v", d_kv, inner)
        self.o = Linear(init, f"{name}.o", inner, d_model)

    def _split(self, x: Tensor) -> Tensor:
        # (..., N, h*dh) -> (..., h, N, dh)
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = x.reshape(*lead, n, self.n_heads, self.d_head)
        nd = x.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        return x.transpose(axes)

    def __call__(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        kv = x if kv is None else kv
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        out = attention(q, k, v)
        nd = out.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        out = out.transpose(axes)
        out = out.reshape(*out.shape[:-2], self.n_heads * self.d_head)
        return self.o(out)


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)); then + MLP(LN(.)). No causal mask."""

    def __init__(self, init: Init, name: str, d_model: int, n_heads: int,
                 d_head: int | None = None, mlp_expansion: int = 1):
        self.ln1 = LayerNorm(init, f"{name}.ln1", d_model)
        self.attn = MultiHeadAttention(init, f"{name}.attn", d_model, n_heads, d_head)
        self.ln2 = LayerNorm(init, f"{name}.ln2", d_model)
        self.mlp = MLP(init, f"{name}.mlp", d_model, mlp_expansion * d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def sinusoidal_embedding(t: np.ndarray, dim: int, min_period: float = 4e-3,
                         max_period: float = 4.0) -> np.ndarray:
    """Sin/cos features of scalar times ``t`` (shape (B,)) -> (B, dim)."""
    if dim % 2:
        raise ValueError("embedding width must be even")
    half = dim // 2
    frac = np.linspace(0.0, 1.0, half)
    period = min_period * (max_period / min_period) ** frac
    ang = np.asarray(t, dtype=np.float64)[..., None] * (2 * np.pi / period)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


__all__ = ["Init", "Module", "Linear", "LayerNorm", "MLP", "MultiHeadAttention",
           "TransformerBlock", "sinusoidal_embedding", "concat"]
