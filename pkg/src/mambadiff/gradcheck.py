"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, record


class NonFiniteLoss(RuntimeError):
    """Loss became non-finite while probing a parameter coordinate."""

    def __init__(self, param_name: str, index):
        super().__init__(f"non-finite loss while probing {param_name!r} at flat index {index}")
        self.param_name = param_name
        self.index = index


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    coords_checked: int


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic scalar-valued function of ``params``
    (freeze all random draws outside it). Requires 64-bit parameters;
    ``step`` must lie in [1e-7, 1e-4]. The relative error is
    |analytic - numeric| / max(1, |analytic|), maximized over the probed
    coordinates. With ``max_coords_per_param`` set, coordinates are
    sampled with ``rng`` instead of sweeping every entry.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-7, 1e-4]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 params; {name!r} is {p.dtype.name}")

    with record() as tape:
        loss = fn()
        if loss.size != 1:
            raise ValueError("fn must return a scalar loss")
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss("<base point>", -1)
        grads = tape.backward(loss)

    worst = (0.0, "", -1)
    checked = 0
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        if max_coords_per_param is None or flat.size <= max_coords_per_param:
            coords = range(flat.size)
        else:
            if rng is None:
                raise ValueError("rng is required when sampling coordinates")
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + step
            up = fn().item()
            flat[i] = saved - step
            down = fn().item()
            flat[i] = saved
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteLoss(name, int(i))
            numeric = (up - down) / (2.0 * step)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, int(i))
    return FiniteDiffReport(worst[0], worst[1], worst[2], checked)
