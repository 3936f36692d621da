"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor turns the check into an absolute one for gradient entries
    smaller than ``floor``, where finite differences carry no relative
    precision.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(fn, arrays: list[np.ndarray], i: int, h: float = 1e-5) -> np.ndarray:
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        j = it.multi_index
        orig = x[j]
        x[j] = orig + h
        fp = float(fn(*[Tensor(a) for a in arrays]).data)
        x[j] = orig - h
        fm = float(fn(*[Tensor(a) for a in arrays]).data)
        x[j] = orig
        g[j] = (fp - fm) / (2 * h)
    return g


def check_gradients(fn, arrays, h: float = 1e-5, wrt=None) -> float:
    """Worst relative error between backprop and finite differences.

    ``fn`` maps tensors to a scalar tensor. Inputs are promoted to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    backward(fn(*leaves))
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric_grad(fn, arrays, i, h)))
    return worst
