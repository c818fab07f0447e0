"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam with bias correction and optional decoupled weight decay.

    A step with zero gradients (and zero moments) leaves parameters
    unchanged apart from weight decay, which defaults to 0. Steps with a
    non-finite gradient are skipped and logged rather than applied.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> bool:
        """Apply one update from a tensor-keyed gradient dict.

        Missing entries count as zero gradient. Returns False (step skipped)
        if any gradient is non-finite.
        """
        resolved = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                log.warning("adam: non-finite gradient for %r at step %d; step skipped", name, self.step_count)
                return False
            resolved[name] = g

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = resolved[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - p.dtype.type(self.lr) * update.astype(p.dtype)
        return True
