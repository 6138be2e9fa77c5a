from __future__ import annotations

import numpy as np
import pytest

from expertlane.sim import SimConfig


@pytest.fixture
def config() -> SimConfig:
    return SimConfig(seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def finite_difference(loss_fn, params: dict[str, np.ndarray], h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss over a parameter dict.

    Perturbs each element in place; the loss function must read the live
    arrays. Independent of every analytic backward path in the package.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        b = numeric[name]
        denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
