"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    points: Sequence[np.ndarray] | np.ndarray,
    tolerance: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare backward() against central differences for a scalar ``fn``.

    ``points`` is one array or a list of arrays, each becoming a
    requires_grad input to ``fn``. Runs in 64-bit mode. The relative error
    of each coordinate is ``|a - n| / max(|a| + |n|, 1e-8)`` scaled by 2,
    i.e. the symmetric relative difference.
    """
    arrays = [points] if isinstance(points, np.ndarray) else list(points)
    with precision(np.float64):
        inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*inputs)
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        backward(out)
        analytic = [
            np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs
        ]

        max_rel = max_abs = 0.0
        count = 0
        for i, base in enumerate(arrays):
            base = np.array(base, dtype=np.float64)
            flat = base.reshape(-1)
            for j in range(flat.size):
                vals = []
                for step in (h, -h):
                    bumped = flat.copy()
                    bumped[j] += step
                    args = [
                        Tensor(bumped.reshape(base.shape) if k == i else np.asarray(a, dtype=np.float64))
                        for k, a in enumerate(arrays)
                    ]
                    vals.append(float(fn(*args).data))
                numeric = (vals[0] - vals[1]) / (2 * h)
                a = float(analytic[i].reshape(-1)[j])
                diff = abs(a - numeric)
                rel = 2.0 * diff / max(abs(a) + abs(numeric), 1e-8)
                # both derivatives essentially zero: relative error is meaningless
                if abs(a) + abs(numeric) < 1e-7:
                    rel = diff
                max_rel = max(max_rel, rel)
                max_abs = max(max_abs, diff)
                count += 1
    return GradCheckReport(max_rel, max_abs, tolerance, count)
