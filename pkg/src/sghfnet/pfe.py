"""Pathology classifier on patch sets; its pre-head features are the GAN's real samples."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import ModelConfig, OptimConfig
from .nn_layers import Dense, EncoderConfig, Module, VitEncoder
from .optim import Adam, bce_loss, check_finite, minibatches
from .synth_data import Subject, read_arrays, stream_rng, write_arrays
from .tensor_engine import Tensor, no_grad, reshape, sigmoid


class PathologyClassifier(Module):
    """ViT patch-set encoder with a single sigmoid unit on top (LUSC = 1)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.encoder = VitEncoder(cfg, rng)
        self.head = Dense(cfg.feature_dim, 1, rng)

    def features(self, patches) -> Tensor:
        return self.encoder(patches)

    def __call__(self, patches) -> Tensor:
        logits = self.head(self.features(patches))
        return sigmoid(reshape(logits, (logits.shape[0],)))


def build_pfe(model_cfg: ModelConfig, patch_size: int, seed: int) -> PathologyClassifier:
    return PathologyClassifier(model_cfg.pathology_encoder(patch_size), stream_rng(seed, "pfe-init"))


def _stack_patches(subjects: Sequence[Subject]) -> np.ndarray:
    return np.stack([s.patches for s in subjects])


def train_pfe(subjects: Sequence[Subject], model_cfg: ModelConfig, optim_cfg: OptimConfig,
              epochs: int, seed: int) -> Tuple[PathologyClassifier, List[dict]]:
    """Fit the pathology classifier with BCE; returns the model and a per-epoch log."""
    if not subjects:
        raise ValueError("train_pfe needs at least one subject")
    labels = np.array([s.label for s in subjects], dtype=np.float64)
    if min((labels == 0).sum(), (labels == 1).sum()) < 2:
        raise ValueError("train_pfe needs at least two subjects of each class")
    model = build_pfe(model_cfg, subjects[0].patches.shape[-1], seed)
    patches = _stack_patches(subjects)
    opt = Adam(model.named_parameters(), lr=optim_cfg.lr, beta1=optim_cfg.beta1,
               beta2=optim_cfg.beta2, eps=optim_cfg.eps)
    rng = stream_rng(seed, "pfe-batches")
    log = []
    model.train()
    for epoch in range(epochs):
        total, correct = 0.0, 0
        for idx in minibatches(len(subjects), optim_cfg.batch_2d, rng):
            p = model(patches[idx])
            loss = bce_loss(p, labels[idx])
            val = check_finite(loss, f"pfe epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += val * len(idx)
            correct += int(((p.data >= 0.5) == (labels[idx] == 1)).sum())
        log.append({"epoch": epoch, "loss": total / len(subjects), "acc": correct / len(subjects)})
    model.eval()
    return model, log


def extract_features(subjects: Sequence[Subject], model: PathologyClassifier,
                     batch: int = 32) -> Dict[int, np.ndarray]:
    """F-dim pathology features per subject id (eval mode, no graph)."""
    out: Dict[int, np.ndarray] = {}
    with no_grad():
        for start in range(0, len(subjects), batch):
            chunk = subjects[start:start + batch]
            feats = model.features(_stack_patches(chunk)).data
            for s, f in zip(chunk, feats):
                out[s.id] = f.copy()
    return out


def extract_path_feature(subject: Subject, model: PathologyClassifier) -> np.ndarray:
    if len(subject.patches) == 0:
        raise ValueError(f"subject {subject.id} has no patches")
    return extract_features([subject], model)[subject.id]


def pfe_classify(subject: Subject, model: PathologyClassifier) -> float:
    """Probability that the subject's patch set is LUSC."""
    with no_grad():
        return float(model(subject.patches[None]).data[0])


def save_feature_cache(directory, features: Dict[int, np.ndarray], meta: dict | None = None) -> None:
    """Manifest plus one blob per subject; consumed by the feature-synthesis stage."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = sorted(features)
    for sid in ids:
        write_arrays(directory / f"feature_{sid:05d}.bin", [features[sid]])
    dim = int(features[ids[0]].shape[0]) if ids else 0
    manifest = {"format": "sghfnet-features/1", "ids": ids, "feature_dim": dim,
                "source": "real-pathology", "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_feature_cache(directory) -> Dict[int, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return {int(sid): read_arrays(directory / f"feature_{sid:05d}.bin")[0] for sid in manifest["ids"]}
