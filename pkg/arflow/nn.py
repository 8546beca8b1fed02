"""Module containing the building blocks of the transformers: a `Module` base
class handling named parameters, and the usual layers (linear, embedding,
normalization, attention, feed-forward).
"""

import copy
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from arflow.errors import ShapeMismatchError
from arflow.tensor import (
    Tensor,
    concat,
    embedding_lookup,
    get_default_dtype,
    linear,
    rms_normalize,
    rotary,
    scaled_dot_product_attention,
    silu,
)


ROPE_BASE = 10000.0


class Parameter(Tensor):
    """Tensor registered as a trainable parameter of a `Module`."""

    def __init__(self, data: np.ndarray):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class of all the layers and models.

    Parameters are discovered from the attributes of the instance, in
    insertion order: `Parameter` attributes, sub-modules, and lists of
    sub-modules. Their names are dotted paths (`blocks.0.attn.q.weight`).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """Iterate over the parameters of the module and its sub-modules.

        Args:
            prefix (str, optional): Prefix prepended to every name.

        Yields:
            Pairs of (name, parameter).
        """
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        """Return the parameters of the module as an ordered dictionary."""
        return dict(self.named_parameters(prefix))

    def zero_grad(self):
        """Reset the gradient of every parameter to zeros."""
        for _, p in self.named_parameters():
            p.zero_grad()

    def freeze(self):
        """Stop tracking gradients for every parameter."""
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        """Track gradients again for every parameter."""
        for _, p in self.named_parameters():
            p.requires_grad = True

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Return a copy of the values of every parameter, by name."""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Overwrite the parameters with the given values.

        Args:
            state (Dict[str, np.ndarray]): Values by parameter name. It must
                contain exactly the parameters of the module.

        Raises:
            ShapeMismatchError: If names or shapes don't match the module.
        """
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise ShapeMismatchError(f"Parameter names don't match (missing={missing}, unexpected={unexpected})")
        for name, p in params.items():
            if tuple(state[name].shape) != p.shape:
                raise ShapeMismatchError(
                    f"Parameter `{name}` has shape {p.shape} but the given values have shape {state[name].shape}"
                )
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        """Convert every parameter to the given floating type, in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def clone(self) -> "Module":
        """Return a deep copy of the module (parameters included)."""
        return copy.deepcopy(self)


def normal_init(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> Parameter:
    """Create a parameter with normally distributed values."""
    return Parameter(rng.normal(0.0, std, size=shape).astype(get_default_dtype()))


class Linear(Module):
    """Affine layer, `y = x @ weight + bias`.

    Args:
        d_in (int): Input size.
        d_out (int): Output size.
        rng (np.random.Generator): Generator used for the initialization.
        bias (bool, optional): Whether to use a bias.
        init_scale (float, optional): Multiplier of the default standard
            deviation `1 / sqrt(d_in)`.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        self.weight = normal_init(rng, (d_in, d_out), init_scale / np.sqrt(d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    """Lookup table of learned vectors.

    Args:
        n (int): Number of entries.
        dim (int): Size of each vector.
        rng (np.random.Generator): Generator used for the initialization.
        std (float, optional): Standard deviation of the initialization.
    """

    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal_init(rng, (n, dim), std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding_lookup(self.weight, ids)


class RMSNorm(Module):
    """Root-mean-square normalization with a learned gain."""

    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return rms_normalize(x, self.weight)


class MLP(Module):
    """Two-layer feed-forward network with a SiLU activation.

    Args:
        dim (int): Input and output size.
        mult (int): Expansion factor of the hidden layer.
        rng (np.random.Generator): Generator used for the initialization.
    """

    def __init__(self, dim: int, mult: int, rng: np.random.Generator):
        self.up = Linear(dim, mult * dim, rng)
        self.down = Linear(mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(silu(self.up(x)))


def rotary_tables(length: int, head_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Compute the cosine and sine tables of the rotary position encoding.

    Args:
        length (int): Number of positions.
        head_dim (int): Size of each attention head (even).

    Returns:
        Cosines and sines, both of shape (length, head_dim / 2).
    """
    freqs = ROPE_BASE ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = np.arange(length)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


@dataclass
class KVCache:
    """Keys and values already computed by one attention layer, so cached
    decoding only processes the new positions.
    """

    k: Optional[Tensor] = None
    v: Optional[Tensor] = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


class Attention(Module):
    """Multi-head attention, used either as self-attention (with optional
    causal mask and rotary encoding) or as cross-attention over a context.

    Args:
        dim (int): Model width.
        heads (int): Number of heads, must divide `dim`.
        rng (np.random.Generator): Generator used for the initialization.
        causal (bool, optional): Whether position `i` only attends to `j <= i`.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        assert dim % heads == 0, f"The model width ({dim}) should be divisible by the number of heads ({heads})"
        self.heads = heads
        self.causal = causal
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.o = Linear(dim, dim, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(
        self,
        x: Tensor,
        context: Optional[Tensor] = None,
        rope: Optional[Tuple[np.ndarray, np.ndarray]] = None,
        cache: Optional[KVCache] = None,
    ) -> Tensor:
        """Attend from `x` to itself (or to `context`).

        Args:
            x (Tensor): Queries, of shape (batch, T, dim).
            context (Optional[Tensor], optional): Keys/values source for
                cross-attention, of shape (batch, S, dim).
            rope (Optional[Tuple[np.ndarray, np.ndarray]], optional): Rotary
                tables for the positions of `x`.
            cache (Optional[KVCache], optional): Cache of the previous
                positions, extended in place.

        Returns:
            Tensor of shape (batch, T, dim).
        """
        source = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(source)), self._split(self.v(source))
        if rope is not None:
            q, k = rotary(q, *rope), rotary(k, *rope)
        if cache is not None:
            if cache.k is not None:
                k, v = concat([cache.k, k], axis=2), concat([cache.v, v], axis=2)
            cache.k, cache.v = k, v

        out = scaled_dot_product_attention(q, k, v, causal=self.causal and context is None)
        b, _, t, _ = out.shape
        return self.o(out.transpose(0, 2, 1, 3).reshape(b, t, x.shape[-1]))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion times.

    Args:
        t (np.ndarray): Times in [0, 1], of shape (batch,).
        dim (int): Size of the embedding (even).

    Returns:
        Array of shape (batch, dim).
    """
    half = dim // 2
    freqs = np.exp(-np.log(ROPE_BASE) * np.arange(half) / half)
    angles = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=-1)

