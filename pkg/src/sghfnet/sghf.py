"""Fusion classifier over radiological and synthesized pathological features.

Variants:
  sghf          concat(f_p, f_r) -> Dense(2F, F) -> ReLU -> Dense(F, 1)
  benchmark-rf  f_r -> Dense(F, 1)
  spf-only      f_p -> Dense(F, 1)
  double-rf     concat(f_r, f_r') from two independent encoders -> Dense(2F, F) -> ReLU -> Dense(F, 1)

f_r comes from a trainable CNN encoder over the preprocessed volume, f_p from
the frozen feature generator.  The generator is held as a private attribute
so it never shows up among the model's trainable parameters.
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import VARIANTS, ModelConfig, OptimConfig
from .nn_layers import CnnEncoder, Dense, Module
from .optim import Adam, bce_loss, check_finite, minibatches
from .pfsm import NEUTRAL_LABEL, Generator, stack_volumes, synthesize_features
from .synth_data import DataConfig, Subject, stream_rng
from .tensor_engine import Tensor, concat, no_grad, relu, reshape, sigmoid

NEEDS_GENERATOR = ("sghf", "spf-only")
TWO_BRANCH = ("sghf", "double-rf")


class FreezeViolation(RuntimeError):
    """The frozen generator changed or received gradient during classifier training."""


class SghfModel(Module):
    def __init__(self, variant: str, model_cfg: ModelConfig, seed: int,
                 generator: Optional[Generator] = None, c_mode: str = "neutral",
                 lambda_r: float = 1.0, lambda_p: float = 1.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant in NEEDS_GENERATOR and generator is None:
            raise ValueError(f"variant {variant!r} needs a trained generator")
        self.variant = variant
        self.c_mode = c_mode
        self.lambda_r, self.lambda_p = lambda_r, lambda_p
        self.feature_dim = f = model_cfg.feature_dim
        enc_cfg = model_cfg.encoder(in_channels=1)
        # same stream for every variant: equal seeds give equal encoder weights
        if variant != "spf-only":
            self.rfem = CnnEncoder(enc_cfg, stream_rng(seed, "rfem"))
        if variant == "double-rf":
            self.rfem2 = CnnEncoder(enc_cfg, stream_rng(seed, "rfem-2"))
        head_rng = stream_rng(seed, "fusion-head")
        if variant in TWO_BRANCH:
            self.hidden = Dense(2 * f, f, head_rng)
        # zero output layer: training starts at p = 0.5 with no random class orientation
        self.out = Dense(f, 1, head_rng, zero_init=True)
        self._generator = generator if variant in NEEDS_GENERATOR else None
        if variant in NEEDS_GENERATOR:
            # training-set statistics of f_p, set by train_sghf
            self.fp_mean = self.add_buffer("fp_mean", np.zeros(f))
            self.fp_std = self.add_buffer("fp_std", np.ones(f))

    @property
    def generator(self) -> Optional[Generator]:
        return self._generator

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return self.named_parameters()

    def encoder_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("rfem")}

    def pathology_features(self, volumes: np.ndarray, labels=None) -> Optional[np.ndarray]:
        """Synthesized f_p; neutral label channel unless ``c_mode == 'true'``."""
        if self._generator is None:
            return None
        if self.c_mode == "true":
            if labels is None:
                raise ValueError("c_mode 'true' needs subject labels")
            c = np.asarray(labels, dtype=np.float64)
        else:
            c = NEUTRAL_LABEL
        return synthesize_features(self._generator, volumes, c)

    def __call__(self, volumes, f_p=None) -> Tensor:
        """Probabilities ``(B,)`` for preprocessed volumes ``(B, X, Y, Z)``."""
        vols = np.asarray(volumes, dtype=np.float64)
        x = vols[:, None]
        if self.variant in NEEDS_GENERATOR and f_p is None:
            raise ValueError(f"variant {self.variant!r} needs synthesized features")
        if f_p is not None and self.variant in NEEDS_GENERATOR:
            f_p = Tensor((np.asarray(f_p) - self.fp_mean) / self.fp_std)
        if self.variant == "sghf":
            fused = concat([f_p, self.rfem(x)], axis=1)
        elif self.variant == "double-rf":
            fused = concat([self.rfem(x), self.rfem2(x)], axis=1)
        elif self.variant == "benchmark-rf":
            fused = self.rfem(x)
        else:
            fused = f_p
        if self.variant in TWO_BRANCH:
            fused = relu(self.hidden(fused))
        logits = self.out(fused)
        return sigmoid(reshape(logits, (logits.shape[0],)))


def build_model(variant: str, model_cfg: ModelConfig, seed: int, generator: Optional[Generator] = None,
                c_mode: str = "neutral", lambda_r: float = 1.0, lambda_p: float = 1.0) -> SghfModel:
    if variant in NEEDS_GENERATOR and (generator is None or not generator.trained):
        raise ValueError(f"variant {variant!r} requires trained generator parameters")
    return SghfModel(variant, model_cfg, seed, generator, c_mode, lambda_r, lambda_p)


def params_digest(module: Optional[Module]) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    if module is None:
        return h.hexdigest()
    state = module.state_dict()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def check_gradient_partition(model: SghfModel) -> None:
    """Generator parameters carry no gradient; the trainable side carries some."""
    if model.generator is not None:
        leaked = [k for k, p in model.generator.named_parameters().items() if p.grad is not None]
        if leaked:
            raise FreezeViolation(f"generator parameters received gradient: {leaked[:3]}")
    side = model.encoder_parameters() or model.trainable_parameters()
    if not any(p.grad is not None for p in side.values()):
        raise FreezeViolation("no trainable parameter received gradient")


def train_sghf(model: SghfModel, subjects: Sequence[Subject], optim_cfg: OptimConfig, data_cfg: DataConfig,
               seed: int, epochs: Optional[int] = None, volumes: Optional[np.ndarray] = None,
               on_step=None) -> Tuple[SghfModel, List[dict]]:
    """Fit encoder(s) and head with weighted BCE; the generator stays frozen.

    Synthesized features are computed once up front (the generator is fixed and
    runs in eval mode, so they cannot change) and standardized with their
    training-set mean and std.  After every backward pass the
    gradient partition is checked; the generator digest is compared at the end.
    """
    epochs = optim_cfg.sghf_epochs if epochs is None else epochs
    if volumes is None:
        volumes = stack_volumes(subjects, data_cfg)
    labels = np.array([s.label for s in subjects], dtype=np.float64)
    g_before = params_digest(model.generator)
    f_p = model.pathology_features(volumes, labels)
    if f_p is not None:
        model.fp_mean[...] = f_p.mean(axis=0)
        model.fp_std[...] = np.maximum(f_p.std(axis=0), 1e-8)
    opt = Adam(model.trainable_parameters(), optim_cfg.lr, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.eps)
    rng = stream_rng(seed, "sghf-batches")
    log = []
    model.train()
    for epoch in range(epochs):
        total, correct = 0.0, 0
        for idx in minibatches(len(subjects), optim_cfg.batch_3d, rng, min_size=2):
            p = model(volumes[idx], None if f_p is None else f_p[idx])
            loss = bce_loss(p, labels[idx]) * model.lambda_r
            val = check_finite(loss, f"sghf epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            check_gradient_partition(model)
            if on_step is not None:
                on_step(model)
            opt.step()
            total += val * len(idx)
            correct += int(((p.data >= 0.5) == (labels[idx] == 1)).sum())
        log.append({"epoch": epoch, "loss": total / len(subjects), "acc": correct / len(subjects)})
    model.eval()
    if params_digest(model.generator) != g_before:
        raise FreezeViolation("generator parameters changed during classifier training")
    return model, log


def predict_proba(model: SghfModel, subjects: Sequence[Subject], data_cfg: DataConfig,
                  batch: int = 32) -> np.ndarray:
    """Eval-mode probabilities, in subject order."""
    model.eval()
    out = []
    for start in range(0, len(subjects), batch):
        chunk = subjects[start:start + batch]
        vols = stack_volumes(chunk, data_cfg)
        f_p = model.pathology_features(vols, [s.label for s in chunk])
        with no_grad():
            out.append(model(vols, f_p).data.copy())
    return np.concatenate(out) if out else np.zeros(0)


def hard_label(p) -> np.ndarray:
    """Class 1 iff p >= 0.5 (ties go to class 1)."""
    return (np.asarray(p) >= 0.5).astype(np.int64)


def predict(model: SghfModel, subject: Subject, data_cfg: DataConfig) -> Tuple[float, int]:
    p = float(predict_proba(model, [subject], data_cfg)[0])
    return p, int(hard_label(p))
