"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from datforge.errors import NonFiniteError
from datforge.numerics.tensor import Tensor, no_grad


def numeric_grad(f: Callable[[dict], Tensor], params: dict[str, Tensor], name: str,
                 step: float, coords=None) -> np.ndarray:
    arr = params[name].data
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(params))
            flat[i] = orig - step
            fm = _scalar(f(params))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def _scalar(out) -> float:
    value = float(out.item() if isinstance(out, Tensor) else out)
    if not np.isfinite(value):
        raise NonFiniteError(f"function value is not finite: {value}")
    return value


def grad_check(f: Callable[[dict], Tensor], point: Mapping[str, np.ndarray], step: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over named parameters of the relative error between tape and central differences.

    Per parameter the error is ``max|analytic - central| / max(max|analytic|, max|central|, 1e-12)``.
    ``max_coords`` samples that many coordinates per parameter instead of all.
    """
    params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in point.items()}
    out = f(params)
    _scalar(out)
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        num = numeric_grad(f, params, name, step, coords)
        ana = p.grad
        if coords is not None:
            num = num.reshape(-1)[coords]
            ana = ana.reshape(-1)[coords]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / denom))
    return worst
