"""Small transformer building blocks on top of :mod:`dslab.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = T.init_uniform(rng, (n_in, n_out), fan_in=n_in)
        self.bias = T.zeros_param((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def params(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class LayerNorm:
    def __init__(self, dim: int):
        self.gamma = T.ones_param((dim,))
        self.beta = T.zeros_param((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class SelfAttention:
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.out = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is additive, broadcastable to [B, heads, L, L]."""
        B, L, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
        if mask is not None:
            scores = scores + mask
        att = T.softmax(scores, axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.out(o)

    def params(self) -> list[Tensor]:
        return self.qkv.params() + self.out.params()


class Block:
    """Pre-norm transformer block."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))

    def params(self) -> list[Tensor]:
        return self.ln1.params() + self.attn.params() + self.ln2.params() + self.fc1.params() + self.fc2.params()


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: position t may attend to positions <= t only."""
    return np.triu(np.full((length, length), -1e9), k=1)


def load_into(tensors: list[Tensor], values: list[Tensor]) -> None:
    if len(tensors) != len(values):
        raise ValueError(f"expected {len(tensors)} tensors, got {len(values)}")
    for dst, src in zip(tensors, values):
        if dst.shape != src.shape:
            raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
        dst.data = np.array(src.data, dtype=np.float64)
