"""Stochastic gradient descent with momentum, weight decay and lr steps."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError


class SGD:
    """Momentum SGD: v <- mu*v - lr*(g + wd*w); w <- w + v.

    The effective learning rate is learning_rate * lr_decay^(step // lr_step)
    when lr_step is set; step counting starts at 0, so the first decay
    applies from step lr_step onward.
    """

    def __init__(
        self,
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0005,
        lr_step: int | None = None,
        lr_decay: float = 0.1,
    ):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_step = lr_step
        self.lr_decay = lr_decay
        self.step_count = 0
        self.velocity: list[np.ndarray] | None = None

    @property
    def effective_lr(self) -> float:
        if self.lr_step is None or self.lr_step <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (self.step_count // self.lr_step)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update params in place from matching grads."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        if len(self.velocity) != len(params):
            raise ShapeError("parameter list changed length between steps")
        lr = self.effective_lr
        for w, g, v in zip(params, grads, self.velocity):
            if w.shape != g.shape or w.shape != v.shape:
                raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
            v *= self.momentum
            v -= lr * (g + self.weight_decay * w)
            w += v
        self.step_count += 1


def sgd_step(params, grads, state: SGD) -> None:
    """One update of `params` using the given optimizer state."""
    state.step(params, grads)
