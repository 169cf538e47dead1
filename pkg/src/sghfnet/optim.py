"""Adam and the scalar training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .tensor_engine import ShapeError, Tensor, as_tensor, clip, log

PROB_CLAMP = 1e-7
G_LOSS_MODES = ("saturating", "non-saturating")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters whose gradient is ``None`` are left alone (their moments too).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a module's named parameters (reads ``.grad`` off each tensor)."""

    def __init__(self, named_params: Mapping[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state)


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels ``y``.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before taking logs.
    """
    p = as_tensor(p)
    if np.size(y) != p.size:
        raise ShapeError(f"bce_loss: {p.size} probabilities vs {np.size(y)} labels")
    pc = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    ll = log(pc) * y + log(1.0 - pc) * (1.0 - y)
    return -ll.mean()


def _mean_log(p) -> Tensor:
    pc = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return log(pc).mean()


def _mean_log1m(p) -> Tensor:
    pc = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return log(1.0 - pc).mean()


def gan_source_d_loss(y1_real, y1_fake) -> Tensor:
    return -(_mean_log(y1_real) + _mean_log1m(y1_fake))


def gan_d_loss(y1_real, y1_fake, y2_real, y2_fake, c, class_weight: float = 1.0) -> Tensor:
    """Discriminator loss in minimisation form.

    -[log y1_real + log(1 - y1_fake)] + BCE(y2_real, c) + BCE(y2_fake, c);
    the class head sees real and generated samples with the same true class.
    """
    src = gan_source_d_loss(y1_real, y1_fake)
    cls = bce_loss(y2_real, c) + bce_loss(y2_fake, c)
    return src + cls * class_weight


def gan_g_loss(y1_fake, y2_fake, c, mode: str = "non-saturating", class_weight: float = 1.0) -> Tensor:
    """Generator loss; ``saturating`` is log(1 - D(x_G)), ``non-saturating`` is -log D(x_G)."""
    if mode == "saturating":
        src = _mean_log1m(y1_fake)
    elif mode == "non-saturating":
        src = -_mean_log(y1_fake)
    else:
        raise ValueError(f"unknown generator loss mode {mode!r}; expected one of {G_LOSS_MODES}")
    return src + bce_loss(y2_fake, c) * class_weight


def check_finite(loss: Tensor, where: str) -> float:
    val = float(loss.data)
    if not math.isfinite(val):
        raise NumericalError(f"non-finite loss at {where}")
    return val


def minibatches(n: int, batch: int, rng: np.random.Generator, min_size: int = 1):
    """Shuffled index batches covering ``range(n)``.

    A trailing batch smaller than ``min_size`` is folded into the previous one
    (batch norm needs at least two samples).
    """
    order = rng.permutation(n)
    batches = [order[i:i + batch] for i in range(0, n, batch)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches
