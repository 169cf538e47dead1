"""Conditional GAN that synthesizes pathology feature vectors from CT volumes.

The generator is a residual CNN over the preprocessed volume plus one extra
constant input channel holding the class label ``c``.  The discriminator is
an MLP with a source head (real vs synthesized) and a class head.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig, OptimConfig
from .nn_layers import BatchNorm, CnnEncoder, Dense, Module, frozen
from .optim import Adam, check_finite, gan_d_loss, gan_g_loss
from .synth_data import DataConfig, Subject, preprocess_volume, stream_rng
from .tensor_engine import ShapeError, Tensor, as_tensor, concat, no_grad, relu, reshape, sigmoid

logger = logging.getLogger(__name__)

NEUTRAL_LABEL = 0.5


class Generator(Module):
    """Works in standardized feature units; ``target_mean``/``target_std`` map back."""

    def __init__(self, model_cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = model_cfg.encoder(in_channels=2)
        self.encoder = CnnEncoder(self.cfg, rng)
        f = model_cfg.feature_dim
        self.target_mean = self.add_buffer("target_mean", np.zeros(f))
        self.target_std = self.add_buffer("target_std", np.ones(f))
        self.trained = False

    def __call__(self, volumes, c) -> Tensor:
        return self.encoder(generator_input(volumes, c))

    def to_features(self, z: np.ndarray) -> np.ndarray:
        return self.target_mean + self.target_std * z

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features) - self.target_mean) / self.target_std


class Discriminator(Module):
    """FC -> ReLU -> BN, twice, then two sigmoid heads (source, class)."""

    def __init__(self, feature_dim: int, hidden: Tuple[int, int], rng: np.random.Generator,
                 momentum: float = 0.1):
        super().__init__()
        h1, h2 = hidden
        self.feature_dim = feature_dim
        self.fc1 = Dense(feature_dim, h1, rng)
        self.bn1 = BatchNorm(h1, momentum)
        self.fc2 = Dense(h1, h2, rng)
        self.bn2 = BatchNorm(h2, momentum)
        self.src = Dense(h2, 1, rng)
        self.cls = Dense(h2, 1, rng)

    def __call__(self, x) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        if x.shape[-1] != self.feature_dim:
            raise ShapeError(f"discriminator expects {self.feature_dim}-d features, got {x.shape}")
        h = self.bn1(relu(self.fc1(x)))
        h = self.bn2(relu(self.fc2(h)))
        n = x.shape[0]
        return sigmoid(reshape(self.src(h), (n,))), sigmoid(reshape(self.cls(h), (n,)))


def generator_input(volumes, c) -> np.ndarray:
    """Stack ``(B, X, Y, Z)`` volumes with a constant label channel -> ``(B, 2, X, Y, Z)``."""
    vols = np.asarray(volumes, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (vols.shape[0],))
    label = np.broadcast_to(c.reshape((-1,) + (1,) * (vols.ndim - 1)), vols.shape)
    return np.stack([vols, label], axis=1)


def build_gan(model_cfg: ModelConfig, seed: int) -> Tuple[Generator, Discriminator]:
    g = Generator(model_cfg, stream_rng(seed, "gen-init"))
    d = Discriminator(model_cfg.feature_dim, model_cfg.disc_hidden, stream_rng(seed, "disc-init"),
                      model_cfg.bn_momentum)
    return g, d


def generator_forward(volume: np.ndarray, c: float, g: Generator) -> np.ndarray:
    """Synthesized F-vector for one preprocessed volume (eval mode)."""
    was = g.training
    g.eval()
    with no_grad():
        out = g.to_features(g(volume[None], [c]).data[0])
    g.train(was)
    return out


def discriminator_forward(x, d: Discriminator) -> Tuple[Tensor, Tensor]:
    x = as_tensor(x)
    single = x.ndim == 1
    y1, y2 = d(reshape(x, (1, -1)) if single else x)
    return (y1[0], y2[0]) if single else (y1, y2)


def stack_volumes(subjects: Sequence[Subject], data_cfg: DataConfig) -> np.ndarray:
    return np.stack([preprocess_volume(s, data_cfg) for s in subjects])


def _accuracies(y1r, y1f, y2, c2):
    src = np.concatenate([y1r >= 0.5, y1f < 0.5]).mean()
    cls = ((y2 >= 0.5) == (c2 == 1)).mean()
    return float(src), float(cls)


def adversarial_loop(g: Module, d: Discriminator, draw, optim_cfg: OptimConfig, steps: int,
                     lambda_p: float = 1.0, on_step=None, noise_rng: Optional[np.random.Generator] = None
                     ) -> List[dict]:
    """Alternate ``k_d`` discriminator updates with one generator update.

    ``draw(step)`` returns ``(g_inputs, g_labels, c, real)`` for one batch: the
    generator is called as ``g(g_inputs, g_labels)`` and ``c`` holds the true
    classes of both the real rows and the generated ones.  Each iteration runs
    the generator once; the discriminator takes ``k_d`` steps against the
    detached output, then the generator is updated by back-propagating through
    that same forward pass into the updated (frozen) discriminator.

    With ``optim_cfg.instance_noise > 0`` both real and generated inputs to the
    discriminator get fresh Gaussian noise of that std on every pass, which
    keeps it from separating the two sets by the support of the real features.
    """
    opt_g = Adam(g.named_parameters(), optim_cfg.lr, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.eps)
    opt_d = Adam(d.named_parameters(), optim_cfg.lr, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.eps)
    k_d = optim_cfg.k_d
    sigma = optim_cfg.instance_noise
    if sigma > 0 and noise_rng is None:
        raise ValueError("instance noise needs noise_rng")

    def noisy(x: Tensor) -> Tensor:
        return x + noise_rng.normal(0.0, sigma, x.shape) if sigma > 0 else x

    log: List[dict] = []
    g.train()
    d.train()
    loss_d_val = float("nan")
    acc_src = acc_cls = float("nan")
    for step in range(steps):
        g_in, g_c, c, real = draw(step)
        bsz = len(c)
        real_b = Tensor(real)
        fake = g(g_in, g_c)
        fake_const = Tensor(fake.data)
        for _ in range(k_d):
            y1, y2 = d(noisy(concat([real_b, fake_const], axis=0)))
            loss_d = gan_d_loss(y1[:bsz], y1[bsz:], y2[:bsz], y2[bsz:], c) * lambda_p
            loss_d_val = check_finite(loss_d, f"pfsm step {step} (discriminator)")
            opt_d.zero_grad()
            opt_g.zero_grad()
            loss_d.backward()
            if on_step is not None:
                on_step("d", g, d)
            opt_d.step()
        if k_d > 0:
            acc_src, acc_cls = _accuracies(y1.data[:bsz], y1.data[bsz:], y2.data, np.concatenate([c, c]))
        with frozen(d):
            y1, y2 = d(noisy(concat([real_b, fake], axis=0)))
        loss_g = gan_g_loss(y1[bsz:], y2[bsz:], c, optim_cfg.g_loss) * lambda_p
        loss_g_val = check_finite(loss_g, f"pfsm step {step} (generator)")
        opt_g.zero_grad()
        opt_d.zero_grad()
        loss_g.backward()
        if on_step is not None:
            on_step("g", g, d)
        opt_g.step()
        if step % optim_cfg.log_every == 0 or step == steps - 1:
            log.append({"step": step, "loss_d": loss_d_val, "loss_g": loss_g_val,
                        "acc_src": acc_src, "acc_cls": acc_cls})
    g.zero_grad()
    d.zero_grad()
    g.eval()
    d.eval()
    return log


def train_pfsm(subjects: Sequence[Subject], features: Mapping[int, np.ndarray], model_cfg: ModelConfig,
               optim_cfg: OptimConfig, data_cfg: DataConfig, seed: int, lambda_p: float = 1.0,
               steps: Optional[int] = None, volumes: Optional[np.ndarray] = None,
               on_step=None) -> Tuple[Generator, Discriminator, List[dict]]:
    """Adversarial training of the feature generator against cached pathology features.

    Real features are standardized with their training-set mean and std (kept
    in the generator) so the generator's output starts on the right scale.
    With probability ``label_dropout`` the generator's label channel is set to
    the neutral 0.5 so that it also learns to synthesize class-appropriate
    features when the label is unknown (the inference-time setting).
    """
    missing = [s.id for s in subjects if s.id not in features]
    if missing:
        raise KeyError(f"feature cache lacks subjects {missing[:5]}")
    steps = optim_cfg.pfsm_steps if steps is None else steps
    g, d = build_gan(model_cfg, seed)
    if volumes is None:
        volumes = stack_volumes(subjects, data_cfg)
    labels = np.array([s.label for s in subjects], dtype=np.float64)
    real = np.stack([features[s.id] for s in subjects])
    g.target_mean[...] = real.mean(axis=0)
    g.target_std[...] = np.maximum(real.std(axis=0), 1e-8)
    real = g.standardize(real)
    n, bsz = len(subjects), min(optim_cfg.batch_3d, len(subjects))
    if bsz < 2:
        raise ValueError("train_pfsm needs at least two subjects")
    rng = stream_rng(seed, "pfsm-batches")

    def draw(step):
        idx = rng.choice(n, size=bsz, replace=False)
        c = labels[idx]
        g_c = c.copy()
        g_c[rng.uniform(size=bsz) < optim_cfg.label_dropout] = NEUTRAL_LABEL
        return volumes[idx], g_c, c, real[idx]

    log = adversarial_loop(g, d, draw, optim_cfg, steps, lambda_p, on_step,
                           noise_rng=stream_rng(seed, "pfsm-noise"))
    g.trained = True
    return g, d, log


# -- toy target ----------------------------------------------------------------------------


class ToyGenerator(Module):
    """MLP from (noise z, label c) to a feature vector; used for the Gaussian toy target."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Dense(dim + 1, hidden, rng)
        self.fc2 = Dense(hidden, hidden, rng)
        self.out = Dense(hidden, dim, rng)
        self.trained = False

    def __call__(self, z, c) -> Tensor:
        z = np.asarray(z, dtype=np.float64)
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (z.shape[0],))
        h = relu(self.fc1(np.concatenate([z, c[:, None]], axis=1)))
        return self.out(relu(self.fc2(h)))


def toy_gaussian_sample(rng: np.random.Generator, labels: np.ndarray, dim: int = 8,
                        sep: float = 1.0, std: float = 1.0) -> np.ndarray:
    """Class 1 ~ N(+sep, std^2 I), class 0 ~ N(-sep, std^2 I)."""
    mu = np.where(np.asarray(labels)[:, None] == 1, sep, -sep)
    return mu + std * rng.standard_normal((len(labels), dim))


def train_toy_gan(seed: int, steps: int = 2000, dim: int = 8, batch: int = 64, hidden: int = 32,
                  optim_cfg: Optional[OptimConfig] = None, eval_size: int = 2000):
    """Fit the conditional GAN to two Gaussians; returns (g, d, log, held-out D accuracies)."""
    optim_cfg = optim_cfg or OptimConfig(lr=1e-3, beta1=0.5, k_d=1, log_every=50)
    g = ToyGenerator(dim, hidden, stream_rng(seed, "toy-gen"))
    d = Discriminator(dim, (hidden, hidden), stream_rng(seed, "toy-disc"))
    rng = stream_rng(seed, "toy-batches")

    def draw(step):
        c = rng.integers(0, 2, batch).astype(np.float64)
        return rng.standard_normal((batch, dim)), c, c, toy_gaussian_sample(rng, c, dim)

    log = adversarial_loop(g, d, draw, optim_cfg, steps, noise_rng=stream_rng(seed, "toy-noise"))
    g.trained = True
    ev = stream_rng(seed, "toy-eval")
    c = ev.integers(0, 2, eval_size).astype(np.float64)
    real = toy_gaussian_sample(ev, c, dim)
    with no_grad():
        fake = g(ev.standard_normal((eval_size, dim)), c).data
        y1r, y2r = d(real)
        y1f, y2f = d(fake)
    src, cls = _accuracies(y1r.data, y1f.data, np.concatenate([y2r.data, y2f.data]), np.concatenate([c, c]))
    return g, d, log, {"acc_src": src, "acc_cls": cls}


def synthesize_features(g: Generator, volumes: np.ndarray, c) -> np.ndarray:
    """Batch synthesis in eval mode; ``c`` is a scalar or per-volume labels."""
    if not g.trained:
        raise RuntimeError("generator has not been trained")
    was = g.training
    g.eval()
    with no_grad():
        out = g.to_features(g(volumes, c).data)
    g.train(was)
    return out


def synthesize_feature(subject: Subject, g: Generator, data_cfg: DataConfig,
                       c: Optional[float] = None) -> np.ndarray:
    """Synthesized feature for one subject; ``c=None`` feeds the neutral label."""
    c = NEUTRAL_LABEL if c is None else c
    return synthesize_features(g, preprocess_volume(subject, data_cfg)[None], [c])[0]


def evaluate_discriminator(g: Generator, d: Discriminator, volumes: np.ndarray, labels: np.ndarray,
                           real: np.ndarray, c=None) -> Dict[str, float]:
    """Eval-mode source and class accuracy of D on real features vs synthesized ones."""
    labels = np.asarray(labels, dtype=np.float64)
    c = labels if c is None else c
    fakes = synthesize_features(g, volumes, c)
    with no_grad():
        d.eval()
        y1r, y2r = d(g.standardize(real))
        y1f, y2f = d(g.standardize(fakes))
    src, cls = _accuracies(y1r.data, y1f.data, np.concatenate([y2r.data, y2f.data]),
                           np.concatenate([labels, labels]))
    return {"acc_src": src, "acc_cls": cls, "mean_y1_real": float(y1r.data.mean()),
            "mean_y1_fake": float(y1f.data.mean())}
