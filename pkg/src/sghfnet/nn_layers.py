"""Layers and the two encoder families (residual CNN and patch-set ViT)."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor_engine import (
    ShapeError,
    Tensor,
    as_tensor,
    batch_norm as _batch_norm,
    concat,
    conv,
    matmul,
    parameter,
    relu,
    reshape,
    softmax,
    transpose,
)

BACKBONES = ("cnn-small", "cnn-medium", "vit")
DEFAULT_WIDTHS = {"cnn-small": (24, 48), "cnn-medium": (24, 48, 96, 192)}


@dataclass
class EncoderConfig:
    kind: str = "cnn-small"
    in_channels: int = 1
    spatial_rank: int = 3
    feature_dim: int = 64
    widths: Optional[Tuple[int, ...]] = None
    bn_momentum: float = 0.1
    # ViT only
    patch_size: int = 64
    token_size: int = 8
    heads: int = 4
    d_k: int = 8
    depth: int = 1
    mlp_ratio: int = 2
    use_pos_embedding: bool = True

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        if self.kind == "vit" and self.patch_size % self.token_size:
            raise ValueError("patch_size must be a multiple of token_size")

    @property
    def stage_widths(self) -> Tuple[int, ...]:
        return self.widths if self.widths else DEFAULT_WIDTHS[self.kind]

    @property
    def d_model(self) -> int:
        return self.heads * self.d_k


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self.training = False

    def add_param(self, name: str, data) -> Tensor:
        t = parameter(data, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()
        for k, b in bufs.items():
            b[...] = state[k]


def _walk(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.children():
        yield from _walk(child)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradients and running-stat updates for the given modules."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    norms = [m for root in modules for m in _walk(root) if isinstance(m, BatchNorm)]
    stat_flags = [m.update_stats for m in norms]
    for p in params:
        p.requires_grad = False
    for m in norms:
        m.update_stats = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        for m, f in zip(norms, stat_flags):
            m.update_stats = f


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


# -- basic layers -----------------------------------------------------------------


def dense(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = matmul(x, w) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), w), (-1,))
    return out if b is None else out + b


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    return _batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero_init else he_normal(rng, (n_in, n_out), n_in)
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(n_out))

    def __call__(self, x):
        return dense(x, self.w, self.b)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps
        self.update_stats = True

    def __call__(self, x):
        return _batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps, self.update_stats)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rank: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = c_in * k ** rank
        self.kernel = self.add_param("kernel", he_normal(rng, (c_out, c_in) + (k,) * rank, fan_in))
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return conv(x, self.kernel, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """relu(BN(conv(relu(BN(conv(x))))) + skip(x)), skip is 1x1 conv on shape change."""

    def __init__(self, c_in, c_out, rank, rng, stride=1, momentum=0.1):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, 3, rank, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(c_out, momentum)
        self.conv2 = Conv(c_out, c_out, 3, rank, rng, padding=1)
        self.bn2 = BatchNorm(c_out, momentum)
        self.skip = Conv(c_in, c_out, 1, rank, rng, stride=stride) if (stride != 1 or c_in != c_out) else None

    def __call__(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return relu(h + (self.skip(x) if self.skip is not None else x))


class CnnEncoder(Module):
    """Residual CNN: stride-2 stem, one residual block per stage, GAP, dense to F."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.kind == "vit":
            raise ValueError("CnnEncoder needs a cnn-* backbone config")
        self.cfg = cfg
        widths = cfg.stage_widths
        rank, mom = cfg.spatial_rank, cfg.bn_momentum
        self.stem = Conv(cfg.in_channels, widths[0], 3, rank, rng, stride=2, padding=1)
        self.stem_bn = BatchNorm(widths[0], mom)
        blocks = []
        c_prev = widths[0]
        for i, w in enumerate(widths):
            blocks.append(ResidualBlock(c_prev, w, rank, rng, stride=1 if i == 0 else 2, momentum=mom))
            c_prev = w
        self.blocks = blocks
        self.head = Dense(c_prev, cfg.feature_dim, rng)

    def __call__(self, image) -> Tensor:
        x = as_tensor(image)
        rank = self.cfg.spatial_rank
        if x.ndim != rank + 2 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"encoder expects (B, {self.cfg.in_channels}, {rank} spatial dims), got {x.shape}")
        h = relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        pooled = h.mean(axis=tuple(range(2, h.ndim)))
        return self.head(pooled)


def cnn_encode(image, cfg: EncoderConfig, params: CnnEncoder) -> Tensor:
    """Encode one image (``(C, *spatial)``) or a batch into F-dim features."""
    x = as_tensor(image)
    single = x.ndim == cfg.spatial_rank + 1
    if single:
        x = reshape(x, (1,) + x.shape)
    out = params(x)
    return reshape(out, (cfg.feature_dim,)) if single else out


# -- attention ----------------------------------------------------------------------


class AttentionParams(Module):
    """Per-head projections stored column-stacked: head t uses columns t*d_k:(t+1)*d_k."""

    def __init__(self, d_model: int, heads: int, d_k: int, rng: np.random.Generator,
                 d_v: Optional[int] = None):
        super().__init__()
        d_v = d_k if d_v is None else d_v
        self.d_model, self.heads, self.d_k, self.d_v = d_model, heads, d_k, d_v
        self.w_q = self.add_param("w_q", rng.standard_normal((d_model, heads * d_k)) / math.sqrt(d_model))
        self.w_k = self.add_param("w_k", rng.standard_normal((d_model, heads * d_k)) / math.sqrt(d_model))
        self.w_v = self.add_param("w_v", rng.standard_normal((d_model, heads * d_v)) / math.sqrt(d_model))
        self.w_o = self.add_param("w_o", rng.standard_normal((heads * d_v, d_model)) / math.sqrt(heads * d_v))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, hd = x.shape
    return transpose(reshape(x, (b, n, heads, hd // heads)), (0, 2, 1, 3))


def attention(queries, keys_values, p: AttentionParams, return_weights: bool = False):
    """Multi-head scaled dot-product attention of ``queries`` over ``keys_values``.

    Inputs are ``(n, d_model)`` or ``(B, n, d_model)``.
    """
    q_in, kv_in = as_tensor(queries), as_tensor(keys_values)
    if q_in.shape[-1] != p.d_model or kv_in.shape[-1] != p.d_model:
        raise ShapeError(f"attention: token width must be d_model={p.d_model}")
    single = q_in.ndim == 2
    if single:
        q_in = reshape(q_in, (1,) + q_in.shape)
        kv_in = reshape(kv_in, (1,) + kv_in.shape)
    if kv_in.shape[1] < 1:
        raise ShapeError("attention needs at least one key token")
    q = _split_heads(matmul(q_in, p.w_q), p.heads)
    k = _split_heads(matmul(kv_in, p.w_k), p.heads)
    v = _split_heads(matmul(kv_in, p.w_v), p.heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(p.d_k))
    weights = softmax(scores, axis=-1)
    heads = matmul(weights, v)
    b, _, n, _ = heads.shape
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (b, n, p.heads * p.d_v))
    out = matmul(merged, p.w_o)
    if single:
        out = reshape(out, out.shape[1:])
    if return_weights:
        w = weights.data[0] if single else weights.data
        return out, w
    return out


def multi_head_attention(tokens, p: AttentionParams, return_weights: bool = False):
    """Self-attention: concat of per-head softmax(QK^T/sqrt(d_k))V, projected by W_O."""
    return attention(tokens, tokens, p, return_weights)


class TransformerBlock(Module):
    def __init__(self, d_model, heads, d_k, mlp_ratio, rng):
        super().__init__()
        self.attn = AttentionParams(d_model, heads, d_k, rng)
        self.fc1 = Dense(d_model, mlp_ratio * d_model, rng)
        self.fc2 = Dense(mlp_ratio * d_model, d_model, rng)

    def __call__(self, x):
        x = x + multi_head_attention(x, self.attn)
        return x + self.fc2(relu(self.fc1(x)))


def patches_to_tokens(patches: np.ndarray, token_size: int) -> np.ndarray:
    """``(B, P, H, W)`` -> ``(B, P, S, token_size**2)`` non-overlapping sub-patches."""
    b, p, h, w = patches.shape
    s = token_size
    if h % s or w % s:
        raise ShapeError(f"patch {h}x{w} is not divisible into {s}x{s} tokens")
    x = patches.reshape(b, p, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(x.reshape(b, p, (h // s) * (w // s), s * s))


class VitEncoder(Module):
    """Patch-set transformer.

    Each pathology patch is cut into sub-patch tokens that are embedded, given
    a learned within-patch position embedding, rectified and averaged into one
    patch token.  Patch tokens pass through ``depth`` self-attention blocks;
    a learned class token then attends over them (query only) and its state is
    projected to the F-dim feature.  Because the class token never serves as a
    key, the feature is invariant to patch order and to duplicating patches.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.kind != "vit":
            raise ValueError("VitEncoder needs kind='vit'")
        self.cfg = cfg
        d = cfg.d_model
        t2 = cfg.token_size ** 2
        n_tok = (cfg.patch_size // cfg.token_size) ** 2
        self.embed = Dense(t2, d, rng)
        self.pos = self.add_param("pos", 0.02 * rng.standard_normal((n_tok, d)))
        self.cls = self.add_param("cls", rng.standard_normal((1, d)) / math.sqrt(d))
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.d_k, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.readout = AttentionParams(d, cfg.heads, cfg.d_k, rng)
        self.proj = Dense(d, cfg.feature_dim, rng)

    def tokens(self, patches) -> Tensor:
        arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
        sub = patches_to_tokens(arr, self.cfg.token_size)
        h = self.embed(sub)
        if self.cfg.use_pos_embedding:
            h = h + self.pos
        return relu(h).mean(axis=2)

    def __call__(self, patches) -> Tensor:
        """``(B, P, H, W)`` patch stacks -> ``(B, F)`` features."""
        shape = np.shape(patches.data if isinstance(patches, Tensor) else patches)
        if len(shape) != 4:
            raise ShapeError(f"ViT expects (B, P, H, W) patches, got shape {shape}")
        if shape[1] < 1:
            raise ValueError("ViT needs at least one patch per subject")
        x = self.tokens(patches)
        for block in self.blocks:
            x = block(x)
        q = np.zeros((x.shape[0], 1, self.cfg.d_model)) + self.cls
        pooled = attention(q, x, self.readout)
        return self.proj(reshape(pooled, (x.shape[0], self.cfg.d_model)))


def vit_encode(patches: Sequence, cfg: EncoderConfig, params: VitEncoder) -> Tensor:
    """Encode one subject's list of 2-D patches into an F-dim feature."""
    if len(patches) == 0:
        raise ValueError("vit_encode needs at least one patch")
    stack = np.stack([p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in patches])
    return reshape(params(stack[None]), (cfg.feature_dim,))


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Module:
    return VitEncoder(cfg, rng) if cfg.kind == "vit" else CnnEncoder(cfg, rng)
