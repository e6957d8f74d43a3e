"""
optimizer.py

Parameter updates for training: gradient clipping, gradient accumulation,
AdamW with decoupled weight decay, and a reduce-on-plateau learning-rate
scheduler. All state is plain numpy so it can be saved next to a checkpoint.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from autodiff import Tensor

logger = logging.getLogger(__name__)

CLIP_MODES = ("value", "norm")


def clip_by_value(grads: Sequence[np.ndarray], clip_value: float) -> List[np.ndarray]:
    """Clamp every gradient component into [-clip_value, clip_value]."""
    return [np.clip(g, -clip_value, clip_value) for g in grads]


def clip_by_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0:
        return [g.copy() for g in grads]
    factor = max_norm / total
    return [g * factor for g in grads]


def clip_gradients(grads: Sequence[np.ndarray], clip_value: float, mode: str = "value") -> List[np.ndarray]:
    if mode == "value":
        return clip_by_value(grads, clip_value)
    if mode == "norm":
        return clip_by_norm(grads, clip_value)
    raise ValueError(f"unknown clip mode {mode!r}, expected one of {CLIP_MODES}")


class GradientAccumulator:
    """
    Sums gradients over micro-batches and hands back their mean.

    Args:
        shapes: Shapes of the parameters, in optimizer order
        every: Number of micro-batches per update
    """

    def __init__(self, shapes: Iterable[tuple], every: int = 1):
        if every < 1:
            raise ValueError(f"accumulate_batches must be >= 1, got {every}")
        self.every = every
        self.sums = [np.zeros(s) for s in shapes]
        self.count = 0

    def add(self, grads: Sequence[np.ndarray]) -> None:
        for total, g in zip(self.sums, grads):
            total += g
        self.count += 1

    @property
    def ready(self) -> bool:
        return self.count >= self.every

    def mean(self) -> List[np.ndarray]:
        return [s / self.count for s in self.sums]

    def reset(self) -> None:
        for s in self.sums:
            s.fill(0.0)
        self.count = 0


class AdamW:
    """
    Adam with bias-corrected moments and decoupled weight decay.

    Parameters are updated in place:
        p <- p - lr * weight_decay * p
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(
        self,
        params: List[Tensor],
        lr: float = 2e-5,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            value = p.value.astype(np.float64)
            if self.weight_decay:
                value = value - self.lr * self.weight_decay * value
            p.value[...] = value - self.lr * update

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam_step": np.array(self.step_count), "lr": np.array(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam_step"])
        self.lr = float(state["lr"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


@dataclass
class PlateauScheduler:
    """
    Reduce-on-plateau learning rate.

    A loss counts as an improvement when it beats the best seen so far by a
    relative margin `threshold * |best|`. After `patience` consecutive
    non-improving steps the rate is multiplied by `factor`, floored at
    `min_lr`, and the counter restarts.

    The trainer steps it once per optimizer update with the mean loss of that
    update's micro-batches, so with gradient accumulation `patience` counts
    updates, not micro-batches.
    """

    lr: float
    factor: float = 0.5
    patience: int = 1000
    threshold: float = 1e-4
    min_lr: float = 1e-8
    best: float = math.inf
    bad_steps: int = 0
    reductions: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"factor must be in (0, 1), got {self.factor}")

    def is_improvement(self, loss: float) -> bool:
        if math.isinf(self.best):
            return True
        return loss < self.best - self.threshold * abs(self.best)

    def step(self, loss: float) -> float:
        if self.is_improvement(loss):
            self.best = loss
            self.bad_steps = 0
            return self.lr
        self.bad_steps += 1
        if self.bad_steps >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.info("Plateau: learning rate %.3g -> %.3g", self.lr, new_lr)
                self.reductions += 1
            self.lr = new_lr
            self.bad_steps = 0
        return self.lr

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            "sched_lr": np.array(self.lr),
            "sched_best": np.array(self.best),
            "sched_bad": np.array(self.bad_steps),
            "sched_reductions": np.array(self.reductions),
        }

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.lr = float(state["sched_lr"])
        self.best = float(state["sched_best"])
        self.bad_steps = int(state["sched_bad"])
        self.reductions = int(state["sched_reductions"])


def plateau_scheduler(history: Sequence[float], state: Optional[PlateauScheduler] = None, **kwargs) -> float:
    """
    Feed a loss history through a scheduler and return the resulting rate.

    Args:
        history: Non-empty sequence of loss values, oldest first
        state: Scheduler to advance; a fresh one is built from kwargs otherwise

    Returns:
        The learning rate after the last value
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    scheduler = state if state is not None else PlateauScheduler(**kwargs)
    for loss in history:
        scheduler.step(float(loss))
    return scheduler.lr
