"""Adam, polynomial learning-rate decay and the three training losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    NumericalError,
    ShapeError,
    Tensor,
    _sigmoid_np,
    apply_op,
    as_tensor,
    mean,
    mul,
    sub,
)


@dataclass
class PolySchedule:
    lr0: float
    total_steps: int
    power: float = 1.0
    floor_lr: float = 0.0


def schedule_lr(s: PolySchedule, t: int) -> float:
    """floor + (lr0 - floor) * (1 - t/T)^power, held at floor once t >= T."""
    if s.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if t < 0:
        raise ValueError("step must be non-negative")
    if t >= s.total_steps:
        return s.floor_lr
    return s.floor_lr + (s.lr0 - s.floor_lr) * (1.0 - t / s.total_steps) ** s.power


@dataclass
class AdamState:
    lr0: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              lr_t: float | None = None) -> None:
    """In-place bias-corrected Adam update. ``None`` gradients leave a parameter as is."""
    if lr_t is None:
        lr_t = state.lr0
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError("parameter list changed between Adam steps")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to Adam")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer wrapper holding an :class:`AdamState` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr0=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr_t: float | None = None) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params], lr_t)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def cross_entropy_2class(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], via log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    if np.any((labels < 0) | (labels >= logits.shape[1])):
        raise ValueError("label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()
    n = labels.size

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return apply_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def masked_bce_logits(logits, labels, mask) -> Tensor:
    """Binary cross-entropy with logits averaged over unmasked entries only.

    Masked entries never touch the arithmetic, so arbitrary values there
    (even non-finite ones) leave loss and gradient unchanged.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.dtype)
    keep = np.asarray(mask, dtype=bool)
    if y.shape != logits.shape or keep.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape}, labels {y.shape}, mask {keep.shape} differ")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every label in the batch is masked")
    x = logits.data[keep]
    yk = y[keep]
    per = np.maximum(x, 0.0) - x * yk + np.log1p(np.exp(-np.abs(x)))
    loss = per.sum() / count

    def bw(g):
        grad = np.zeros_like(logits.data)
        grad[keep] = (_sigmoid_np(x) - yk) * (g / count)
        return (grad,)

    return apply_op(np.asarray(loss), (logits,), bw, "masked_bce")
