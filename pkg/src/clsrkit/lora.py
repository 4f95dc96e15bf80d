"""Low-rank adapters on frozen linear maps."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .nn import FeedForward, Linear, Module
from .numcore import Parameter, Tensor


class LoraAdapter:
    """Trainable factors of ``delta_W = B @ A`` for a frozen (d x k) weight.

    ``A`` is (r, k) drawn from N(0, 1/r); ``B`` is (d, r) and starts at zero,
    so the wrapped map is unchanged at initialisation.
    """

    def __init__(self, d: int, k: int, rank: int, rng: np.random.Generator):
        if rank < 1 or rank > min(d, k):
            raise ValueError(f"rank {rank} invalid for a {d}x{k} weight")
        self.A = Parameter(rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, k)))
        self.B = Parameter(np.zeros((d, rank)))

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data


def lora_forward(A: Tensor, B: Tensor, W0: Tensor, x: Tensor) -> Tensor:
    """``W0 x + B (A x)`` for row-vector batches ``x`` of shape (..., k).

    A 1-D ``x`` is treated as a single column vector.
    """
    if A.shape[0] != B.shape[1]:
        raise ValueError(f"rank mismatch: A has {A.shape[0]} rows, B has {B.shape[1]} columns")
    if W0.shape != (B.shape[0], A.shape[1]):
        raise ValueError(f"W0 {W0.shape} incompatible with B {B.shape} and A {A.shape}")
    vec = x.ndim == 1
    if vec:
        x = nc.reshape(x, (1, -1))
    out = nc.linear(x, W0) + nc.linear(nc.linear(x, A), B)
    return nc.reshape(out, (-1,)) if vec else out


class LoraLinear(Linear):
    """A Linear whose weight/bias are frozen and augmented by ``lora_B @ lora_A``.

    Parameter names of the wrapped weight stay ``weight``/``bias`` so a
    backbone checkpoint loads unchanged.
    """

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator):
        Module.__init__(self)
        self.weight = base.weight
        self.bias = base.bias
        adapter = LoraAdapter(base.n_out, base.n_in, rank, rng)
        self.lora_A = adapter.A
        self.lora_B = adapter.B
        self.weight.freeze()
        if self.bias is not None:
            self.bias.freeze()

    def __call__(self, x: Tensor) -> Tensor:
        out = nc.linear(x, self.weight, self.bias)
        return out + nc.linear(nc.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> np.ndarray:
        return self.weight.data + self.lora_B.data @ self.lora_A.data


class LoraFeedForward(FeedForward):
    """Feed-forward slot with LoRA on both projections."""

    def __init__(self, base: FeedForward, rank: int, rng: np.random.Generator):
        Module.__init__(self)
        self.fc1 = LoraLinear(base.fc1, rank, rng)
        self.fc2 = LoraLinear(base.fc2, rank, rng)

    @property
    def rank(self) -> int:
        return self.fc1.lora_A.shape[0]


def lora_parameter_count(dim: int, hidden: int, rank: int) -> int:
    """Adapter parameters added to one feed-forward slot."""
    return rank * (dim + hidden) * 2
