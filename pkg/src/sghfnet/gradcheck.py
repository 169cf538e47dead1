"""Central finite-difference gradient checks against the autodiff engine."""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor_engine import Tensor

# elements whose gradients are both below this are compared absolutely
ABS_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[List[Tensor]], Tensor], arrays: Sequence[np.ndarray], which: int,
                 coords: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d arrays[which] at flat positions ``coords`` by central differences."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.empty(len(coords))
    flat = base[which].reshape(-1)
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = float(fn([Tensor(a) for a in base]).data)
        flat[c] = orig - h
        down = float(fn([Tensor(a) for a in base]).data)
        flat[c] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def check_gradients(fn: Callable[[List[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    rng: Optional[np.random.Generator] = None, max_coords: Optional[int] = None,
                    h: float = 1e-5) -> float:
    """Largest relative error between autodiff and finite differences over all inputs.

    ``fn`` maps a list of tensors to a scalar tensor.  With ``max_coords`` only a
    random subset of each input's elements is perturbed.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = fn(leaves)
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        size = leaf.size
        if max_coords is not None and size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(size, max_coords, replace=False))
        else:
            coords = np.arange(size)
        analytic = (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)).reshape(-1)[coords]
        numeric = numeric_grad(fn, arrays, i, coords, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_module_gradients(loss_fn: Callable[[], Tensor], params: dict, rng: np.random.Generator,
                           max_coords: int = 8, h: float = 1e-5) -> float:
    """Same check over a module's named parameters (perturbed in place, then restored)."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params.values():
        flat = p.data.reshape(-1)
        k = min(max_coords, flat.size)
        coords = np.sort(rng.choice(flat.size, k, replace=False))
        analytic = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)[coords]
        numeric = np.empty(k)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = float(loss_fn().data)
            flat[c] = orig - h
            down = float(loss_fn().data)
            flat[c] = orig
            numeric[j] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
