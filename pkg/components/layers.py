"""
Layers Component

Parameter registry and the transformer building blocks used by the encoder,
the decoder and the probe heads.
"""

import hashlib
import logging
from collections import OrderedDict
from typing import Dict, Optional

import numpy as np

from components.errors import ParameterError
from components.tensor import (
    Tensor, add, gelu, layer_norm, matmul, reshape, scale, softmax, take, transpose,
)

logger = logging.getLogger(__name__)


class Module:
    """Base class: trainable Tensors and sub-Modules assigned as attributes form the registry."""

    def named_parameters(self, prefix: str = '') -> Dict[str, Tensor]:
        """
        Collect trainable tensors in attribute-definition order.

        Args:
            prefix: Name prefix for nested modules

        Returns:
            Ordered mapping of dotted names to tensors
        """
        params = OrderedDict()
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + attr] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{attr}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{prefix}{attr}.{i}."))
        return params

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def digest(self) -> str:
        """SHA-256 over parameter names and raw bytes; changes whenever any weight does."""
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode('utf-8'))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> 'Module':
        """Cast every parameter in place (float64 is used for gradient checking)."""
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """y = x @ weight + bias, weight stored as [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(_xavier(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)


class MultiHeadAttention(Module):
    """
    Self-attention over a token sequence [T, dim].

    The attention probabilities of the most recent call are kept in
    `last_attention` ([heads, T, T]) for heatmap export.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ParameterError(f"attention dim {dim} is not divisible by {heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._head_dim = dim // heads
        self._last_attention: Optional[np.ndarray] = None

    @property
    def last_attention(self) -> Optional[np.ndarray]:
        return self._last_attention

    def __call__(self, x: Tensor) -> Tensor:
        tokens, dim = x.shape
        qkv = reshape(self.qkv(x), (tokens, 3, self._heads, self._head_dim))
        qkv = transpose(qkv, (1, 2, 0, 3))
        q, k, v = take(qkv, 0, axis=0), take(qkv, 1, axis=0), take(qkv, 2, axis=0)

        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self._head_dim))
        attn = softmax(scores, axis=-1)
        self._last_attention = attn.data

        out = transpose(matmul(attn, v), (1, 0, 2))
        return self.proj(reshape(out, (tokens, dim)))


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: Optional[int] = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))
