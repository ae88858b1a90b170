"""Central finite differences against tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward

# |analytic - numeric| is divided by max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = 1e-5, floor: float = REL_FLOOR) -> dict[str, float]:
    """Max relative error per parameter between tape and finite differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call; it is invoked once under a tape and twice per scalar entry
    without one.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)

    def value() -> float:
        return loss_fn().item()

    errors = {}
    for name, p in params.items():
        num = numeric_grad(value, p.data, h)
        errors[name] = float(relative_error(p.grad, num, floor).max()) if p.data.size else 0.0
    return errors
