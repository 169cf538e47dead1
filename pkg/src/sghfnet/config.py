"""Run configuration: dataclasses, JSON round-trip, presets and content hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

from .nn_layers import BACKBONES, EncoderConfig
from .optim import G_LOSS_MODES
from .synth_data import DataConfig

VARIANTS = ("sghf", "benchmark-rf", "spf-only", "double-rf")
INFERENCE_LABELS = ("neutral", "true")
PFSM_SCOPES = ("per-fold", "global")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class ModelConfig:
    backbone: str = "cnn-small"
    feature_dim: int = 64
    widths: Optional[Tuple[int, ...]] = None
    bn_momentum: float = 0.1
    heads: int = 4
    d_k: int = 8
    vit_depth: int = 1
    token_size: int = 8
    mlp_ratio: int = 2
    disc_hidden: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        self.disc_hidden = tuple(int(w) for w in self.disc_hidden)

    def encoder(self, in_channels: int) -> EncoderConfig:
        """Radiological (CNN) encoder config; the 'vit' backbone is not a CT encoder."""
        kind = "cnn-small" if self.backbone == "vit" else self.backbone
        return EncoderConfig(kind=kind, in_channels=in_channels, spatial_rank=3,
                             feature_dim=self.feature_dim, widths=self.widths,
                             bn_momentum=self.bn_momentum)

    def pathology_encoder(self, patch_size: int) -> EncoderConfig:
        return EncoderConfig(kind="vit", feature_dim=self.feature_dim, patch_size=patch_size,
                             token_size=self.token_size, heads=self.heads, d_k=self.d_k,
                             depth=self.vit_depth, mlp_ratio=self.mlp_ratio)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_3d: int = 16
    batch_2d: int = 16
    pfe_epochs: int = 30
    pfsm_steps: int = 150
    sghf_epochs: int = 50
    k_d: int = 5
    g_loss: str = "non-saturating"
    label_dropout: float = 0.5
    # std of Gaussian noise on discriminator inputs (standardized feature units)
    instance_noise: float = 0.0
    log_every: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    variant: str = "sghf"
    lambda_r: float = 1.0
    lambda_p: float = 1.0
    folds: int = 5
    inference_label: str = "neutral"
    pfsm_scope: str = "per-fold"
    preset: str = "desk"

    def validate(self) -> "RunConfig":
        try:
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.model.backbone in BACKBONES, f"backbone must be one of {BACKBONES}"),
            (self.optim.g_loss in G_LOSS_MODES, f"g_loss must be one of {G_LOSS_MODES}"),
            (self.inference_label in INFERENCE_LABELS, f"inference_label must be one of {INFERENCE_LABELS}"),
            (self.pfsm_scope in PFSM_SCOPES, f"pfsm_scope must be one of {PFSM_SCOPES}"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.model.feature_dim >= 1, "feature_dim must be positive"),
            (self.optim.lr >= 0, "lr must be non-negative"),
            (self.optim.batch_3d >= 2, "batch_3d must be >= 2 (batch norm)"),
            (self.optim.batch_2d >= 1, "batch_2d must be positive"),
            (min(self.optim.pfe_epochs, self.optim.pfsm_steps, self.optim.sghf_epochs, self.optim.k_d) >= 0,
             "epoch/step counts must be non-negative"),
            (0.0 <= self.optim.label_dropout <= 1.0, "label_dropout must lie in [0, 1]"),
            (self.optim.instance_noise >= 0.0, "instance_noise must be >= 0"),
            (self.lambda_r > 0 and self.lambda_p > 0, "lambda_r and lambda_p must be positive"),
            (self.data.patch_size % self.model.token_size == 0, "patch_size must be a multiple of token_size"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    for sect in d.values():
        if isinstance(sect, dict):
            for k, v in sect.items():
                if isinstance(v, tuple):
                    sect[k] = list(v)
    return d


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    try:
        data = DataConfig(**d.pop("data", {}))
        model = ModelConfig(**d.pop("model", {}))
        optim = OptimConfig(**d.pop("optim", {}))
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(data=data, model=model, optim=optim, **d)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def dumps(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def git_blob_hash(payload: bytes) -> str:
    """SHA-1 the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    return git_blob_hash(dumps(cfg).encode())


def preset(name: str) -> RunConfig:
    """Named configurations.

    ``desk`` is the CPU-sized default.  ``paper-scale`` records the full-size
    hyperparameters (512-d features, 12 heads of 64, lr 1e-4, 400 epochs,
    batches of 2 volumes / 16 patch sets, 256x256x128 VOIs, 560x560 patches);
    it is not meant to be run on a desk machine.  ``smoke`` is a seconds-long
    configuration for tests and quick checks.
    """
    if name == "desk":
        # calibrated so 5 folds x 5 seeds of three variants fit in ~15 min on one core
        return RunConfig(
            data=DataConfig(volume_noise_std=0.8),
            model=ModelConfig(feature_dim=16, widths=(8, 16), heads=2, d_k=8, disc_hidden=(32, 32)),
            optim=OptimConfig(pfe_epochs=30, pfsm_steps=600, sghf_epochs=10, instance_noise=1.0),
        )
    if name == "paper-scale":
        return RunConfig(
            data=DataConfig(volume_shape=(320, 320, 160), voi_shape=(256, 256, 128), patch_size=560),
            model=ModelConfig(feature_dim=512, heads=12, d_k=64, token_size=16, vit_depth=12,
                              mlp_ratio=4, widths=(64, 128), disc_hidden=(512, 512)),
            optim=OptimConfig(lr=1e-4, batch_3d=2, batch_2d=16, pfe_epochs=400, sghf_epochs=400,
                              pfsm_steps=4000),
            preset="paper-scale",
        )
    if name == "smoke":
        return RunConfig(
            data=DataConfig(n_subjects=20, volume_shape=(16, 16, 8), voi_shape=(12, 12, 6),
                            patch_size=16, patches_per_subject=2),
            model=ModelConfig(feature_dim=8, widths=(4, 8), heads=2, d_k=4, token_size=4,
                              disc_hidden=(16, 16)),
            optim=OptimConfig(batch_3d=4, batch_2d=4, pfe_epochs=2, pfsm_steps=3, sghf_epochs=2,
                              k_d=2, log_every=1),
            folds=2,
            preset="smoke",
        )
    raise ConfigError(f"unknown preset {name!r}; expected desk, paper-scale or smoke")
