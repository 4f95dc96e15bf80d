"""Distillation divergences and the combined objective."""

from __future__ import annotations

import math

import numpy as np

from .. import numcore as nc
from ..numcore import Tensor


def _position_mask(shape: tuple[int, ...], mask) -> np.ndarray:
    m = np.ones(shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != shape[:-1]:
        raise ValueError(f"mask shape {m.shape} does not match positions {shape[:-1]}")
    if not m.any():
        raise ValueError("no unmasked positions")
    return m


def _masked_mean(per_pos: Tensor, mask: np.ndarray) -> Tensor:
    return nc.sum(per_pos * Tensor(mask, dtype=per_pos.dtype)) * (1.0 / int(mask.sum()))


def _clamp(per_pos: Tensor, lo: float, hi: float) -> Tensor:
    # rounding can leave a per-position divergence a few ulps outside its exact range
    x = per_pos.data
    outside = (x < lo) | (x > hi)
    if not outside.any():
        return per_pos
    edge = Tensor(np.clip(x, lo, hi), dtype=per_pos.dtype)
    return nc.where(outside, edge, per_pos)


def kl_loss(teacher_logits, student_logits: Tensor, tau: float = 1.0, mask=None) -> Tensor:
    """tau^2 * mean over positions of KL(p_teacher || q_student) at temperature tau.

    The teacher side is a constant: no gradient reaches it.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher {t.shape} and student {student_logits.shape} logits differ in shape")
    mask = _position_mask(t.shape, mask)
    logp = nc.log_softmax_tau(Tensor(t, dtype=student_logits.dtype), tau).data
    logq = nc.log_softmax_tau(student_logits, tau)
    dt = student_logits.dtype
    p = Tensor(np.exp(logp), dtype=dt)
    per_pos = _clamp(nc.sum(p * (Tensor(logp, dtype=dt) - logq), axis=-1), 0.0, np.inf)
    return _masked_mean(per_pos, mask) * (tau * tau)


def js_loss(teacher_logits, student_logits: Tensor, tau: float = 1.0, mask=None) -> Tensor:
    """tau^2 * mean over positions of the token-level Jensen-Shannon divergence.

    JS = 1/2 KL(p || m) + 1/2 KL(q || m) with m = (p + q) / 2, computed from
    log-probabilities so that underflowed probabilities stay finite.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher {t.shape} and student {student_logits.shape} logits differ in shape")
    mask = _position_mask(t.shape, mask)
    logp_arr = nc.log_softmax_tau(Tensor(t, dtype=student_logits.dtype), tau).data
    logp = Tensor(logp_arr, dtype=student_logits.dtype)
    logq = nc.log_softmax_tau(student_logits, tau)
    logm = nc.logaddexp(logp, logq) - math.log(2.0)
    p = Tensor(np.exp(logp_arr), dtype=student_logits.dtype)
    q = nc.exp(logq)
    per_pos = _clamp(nc.sum(p * (logp - logm) + q * (logq - logm), axis=-1) * 0.5, 0.0, math.log(2.0))
    return _masked_mean(per_pos, mask) * (tau * tau)


def kd_loss(kind: str, teacher_logits, student_logits: Tensor, tau: float = 1.0, mask=None) -> Tensor:
    if kind == "js":
        return js_loss(teacher_logits, student_logits, tau, mask)
    if kind == "kl":
        return kl_loss(teacher_logits, student_logits, tau, mask)
    raise ValueError(f"unknown distillation loss {kind!r}")


def total_loss(ce, gate, kd, beta: float):
    """ce + gate + beta * kd; accepts tensors or floats."""
    parts = [ce, gate, kd]
    for p in parts:
        v = p.data if isinstance(p, Tensor) else np.asarray(p)
        if not np.isfinite(v).all():
            raise ValueError("total_loss received a non-finite component")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    out = ce + gate
    return out + kd * beta if beta else out
