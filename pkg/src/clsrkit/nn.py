"""Small module system and the transformer building blocks."""

from __future__ import annotations

import copy
import math
from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor

NEG_INF = -1e9


class Module:
    """Container that registers parameters and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            unexpected = set(state) - set(own)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, v in state.items():
            if k not in own:
                continue
            if own[k].shape != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k}: {own[k].shape} vs {v.shape}")
            own[k].data = np.array(v, dtype=own[k].dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Module":
        return copy.deepcopy(self)


class ModuleDict(Module):
    def __init__(self, items: dict[str, Module] | None = None):
        super().__init__()
        for k, v in (items or {}).items():
            self[k] = v

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __setitem__(self, key: str, value: Module) -> None:
        self._modules[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self._modules

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()

    def __len__(self) -> int:
        return len(self._modules)


def uniform_init(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (n_out, n_in), 1.0 / math.sqrt(n_in)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return nc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.weight, self.bias)


class FeedForward(Module):
    """Two linear maps with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, ctx=None) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return nc.transpose(nc.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, source: Tensor, bias: np.ndarray | None = None) -> Tensor:
        """Attend from ``x`` (B, Tq, d) to ``source`` (B, Tk, d).

        ``bias`` is an additive (B or 1, 1, Tq or 1, Tk) mask with 0 or NEG_INF.
        """
        q = self._split(self.query(x))
        k = self._split(self.key(source))
        v = self._split(self.value(source))
        return self.attend(q, k, v, bias)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
        """Scaled dot-product attention on already split heads (B, H, T, d/H)."""
        b, h, t, dh = q.shape
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + Tensor(bias.astype(scores.dtype, copy=False))
        att = nc.matmul(nc.softmax(scores), v)
        return self.out(nc.reshape(nc.transpose(att, (0, 2, 1, 3)), (b, t, h * dh)))


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos position table, sines in the first half of the channels."""
    if channels % 2:
        raise ValueError("sinusoidal embeddings need an even channel count")
    inc = math.log(max_timescale) / (channels // 2 - 1)
    inv = np.exp(-inc * np.arange(channels // 2))
    t = np.arange(length)[:, None] * inv[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)
