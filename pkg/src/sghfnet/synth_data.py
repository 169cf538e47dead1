"""Procedural paired-modality subjects and the image preprocessing operators.

A subject carries a latent 8-vector ``u`` drawn around a class mean; both the
CT-like volume and the pathology-like patches are rendered from the same
``u``, which is what makes pathology features predictable from the volume.

Latent coordinates used by the renderer (0-based):
  u[0:3]  ellipsoid semi-axes          a_i = 4 + 2*sigmoid(u[i])
  u[4:8]  frequencies w1..w4           w_k = 0.5 + sigmoid(u[k+3])
  u[5]    dot-lattice density          sigmoid(u[5])
  u[6]    dot-lattice spacing          3 + round(4*sigmoid(u[6]))
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

LATENT_DIM = 8
BLOB_MAGIC = b"SGHF"
BLOB_VERSION = 1


@dataclass
class DataConfig:
    n_subjects: int = 200
    class_balance: float = 0.5
    volume_shape: Tuple[int, int, int] = (32, 32, 16)
    voi_shape: Tuple[int, int, int] = (16, 16, 8)
    patch_size: int = 64
    patches_per_subject: int = 8
    dilation: int = 3
    class_offset: float = 0.5
    latent_std: float = 0.3
    noise_std: float = 0.05
    # CT noise; higher than the pathology noise makes the volume the weaker modality
    volume_noise_std: float = 0.05
    # 0 = training distribution; >0 degrades it (external-validation analog)
    shift: float = 0.0

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.voi_shape = tuple(int(v) for v in self.voi_shape)

    def validate(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie strictly between 0 and 1")
        if any(v < 1 for v in self.volume_shape) or len(self.volume_shape) != 3:
            raise ValueError("volume_shape must be three positive sizes")
        if any(o > v for o, v in zip(self.voi_shape, self.volume_shape)):
            raise ValueError(f"voi_shape {self.voi_shape} exceeds volume_shape {self.volume_shape}")
        if self.patch_size < 1 or self.patches_per_subject < 1:
            raise ValueError("patch_size and patches_per_subject must be positive")
        if min(self.noise_std, self.volume_noise_std, self.shift) < 0 or self.latent_std <= 0:
            raise ValueError("noise levels and shift must be >= 0 and latent_std > 0")


@dataclass
class Subject:
    id: int
    label: int
    volume: np.ndarray
    mask: np.ndarray
    patches: np.ndarray  # (P, H, W)
    u: np.ndarray


def stream_rng(seed: int, *keys) -> np.random.Generator:
    """Independent RNG stream for ``(seed, *keys)``; string keys are CRC-hashed."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_subject(seed: int, id: int, label: int, cfg: DataConfig | None = None) -> Subject:
    cfg = cfg or DataConfig()
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    rng = stream_rng(seed, "subject", id)
    mu = cfg.class_offset if label == 1 else -cfg.class_offset
    u = mu + cfg.latent_std * (1.0 + cfg.shift) * rng.standard_normal(LATENT_DIM)
    noise = cfg.noise_std * (1.0 + 3.0 * cfg.shift)
    volume_noise = cfg.volume_noise_std * (1.0 + 3.0 * cfg.shift)

    shape = cfg.volume_shape
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    jitter = np.array([n / 8.0 for n in shape])
    centre = (np.array(shape) - 1) / 2.0 + rng.uniform(-1.0, 1.0, 3) * jitter
    axes = 4.0 + 2.0 * _sigmoid(u[:3])
    blob = np.exp(-sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, axes)))
    w1, w2, w3, w4 = 0.5 + _sigmoid(u[4:8])
    modulation = 1.0 + 0.3 * np.sin(w1 * grids[0]) * np.sin(w2 * grids[1])
    volume = np.clip(blob * modulation + volume_noise * rng.standard_normal(shape), 0.0, 1.0)
    mask = blob > 0.2

    density = _sigmoid(u[5])
    spacing = 3 + int(round(4.0 * _sigmoid(u[6])))
    size = cfg.patch_size
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    patches = np.empty((cfg.patches_per_subject, size, size))
    for k in range(cfg.patches_per_subject):
        phi = rng.uniform(0.0, 2.0 * np.pi)
        tex = 0.5 + 0.25 * np.sin(w3 * xx + phi) * np.cos(w4 * yy)
        oy, ox = rng.integers(0, spacing, size=2)
        lattice = np.zeros((size, size))
        sub = lattice[oy::spacing, ox::spacing]
        sub[...] = 0.3 * (rng.uniform(size=sub.shape) < density)
        img = tex + lattice + noise * rng.standard_normal((size, size))
        patches[k] = normalize_unit(img)
    return Subject(id=int(id), label=int(label), volume=volume, mask=mask, patches=patches, u=u)


def assign_labels(n: int, balance: float, seed: int) -> np.ndarray:
    n1 = int(round(n * balance))
    labels = np.array([1] * n1 + [0] * (n - n1), dtype=np.int64)
    stream_rng(seed, "labels").shuffle(labels)
    return labels


def generate_dataset(cfg: DataConfig, seed: int) -> List[Subject]:
    cfg.validate()
    labels = assign_labels(cfg.n_subjects, cfg.class_balance, seed)
    return [generate_subject(seed, i, int(labels[i]), cfg) for i in range(cfg.n_subjects)]


# -- preprocessing ---------------------------------------------------------------------


def dilate_mask(mask: np.ndarray, r: int = 3) -> np.ndarray:
    """``r`` rounds of 6-connected dilation, i.e. the L1 ball of radius ``r``."""
    out = np.asarray(mask, dtype=bool).copy()
    for _ in range(r):
        grown = out.copy()
        for ax in range(out.ndim):
            lo = [slice(None)] * out.ndim
            hi = [slice(None)] * out.ndim
            lo[ax], hi[ax] = slice(0, -1), slice(1, None)
            grown[tuple(lo)] |= out[tuple(hi)]
            grown[tuple(hi)] |= out[tuple(lo)]
        out = grown
    return out


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    coords = np.argwhere(mask)
    if coords.size == 0:
        raise ValueError("mask is empty")
    return coords.mean(axis=0)


def crop_voi(volume: np.ndarray, mask: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Crop ``out_shape`` around the (half-up rounded) mask centroid, kept in bounds."""
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != volume.ndim or any(o > v for o, v in zip(out_shape, volume.shape)):
        raise ValueError(f"VOI {out_shape} does not fit inside volume {volume.shape}")
    centre = np.floor(mask_centroid(mask) + 0.5).astype(int)
    starts = [min(max(c - o // 2, 0), v - o) for c, o, v in zip(centre, out_shape, volume.shape)]
    return volume[tuple(slice(s, s + o) for s, o in zip(starts, out_shape))].copy()


def normalize_unit(x: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant array maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def preprocess_volume(subject: Subject, cfg: DataConfig) -> np.ndarray:
    """Dilate the lesion mask, zero everything outside it, crop the VOI, rescale to [0, 1]."""
    roi = dilate_mask(subject.mask, cfg.dilation)
    return normalize_unit(crop_voi(subject.volume * roi, roi, cfg.voi_shape))


def extract_patches_with_coverage(image2d: np.ndarray, roi_mask: np.ndarray, patch_size: int,
                                  stride: int, min_coverage: float = 0.8,
                                  return_positions: bool = False):
    """Sliding-window patches whose ROI fraction is strictly above ``min_coverage``."""
    h, w = image2d.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {image2d.shape}")
    if roi_mask.shape != image2d.shape:
        raise ValueError("roi_mask must match the image shape")
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(roi_mask.astype(np.int64), axis=0), axis=1)
    area = patch_size * patch_size
    patches, positions = [], []
    for y in range(0, h - patch_size + 1, stride):
        for x in range(0, w - patch_size + 1, stride):
            y1, x1 = y + patch_size, x + patch_size
            covered = integral[y1, x1] - integral[y, x1] - integral[y1, x] + integral[y, x]
            # integer comparison: covered/area > min_coverage without float rounding
            if covered * 10 ** 6 > round(min_coverage * 10 ** 6) * area:
                patches.append(image2d[y:y1, x:x1].copy())
                positions.append((y, x))
    return (patches, positions) if return_positions else patches


# -- folds -------------------------------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    assignment: Dict[int, int]
    test: List[List[int]] = field(default_factory=list)
    train: List[List[int]] = field(default_factory=list)


def split_folds(subject_ids: Sequence[int], labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldSplit:
    """Stratified subject-level k-fold partition."""
    ids = np.asarray(subject_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("subject ids must be unique")
    rng = stream_rng(seed, "folds")
    assignment: Dict[int, int] = {}
    offset = 0
    for cls in (0, 1):
        members = np.sort(ids[labels == cls])
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} subjects; need at least k={k}")
        members = members[rng.permutation(len(members))]
        for i, sid in enumerate(members):
            assignment[int(sid)] = (offset + i) % k
        offset += len(members)
    test = [sorted(s for s, f in assignment.items() if f == fold) for fold in range(k)]
    train = [sorted(s for s, f in assignment.items() if f != fold) for fold in range(k)]
    return FoldSplit(k=k, assignment=dict(sorted(assignment.items())), test=test, train=train)


# -- persistence -----------------------------------------------------------------------


def write_arrays(path: Path, arrays: Sequence[np.ndarray]) -> None:
    """Binary blob: magic, version, count, then per array ndim, shape, float64 LE data."""
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<II", BLOB_VERSION, len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path: Path) -> List[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: not a subject blob")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    pos, out = 12, []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    return out


def _subject_file(sid: int) -> str:
    return f"subject_{sid:05d}.bin"


def save_dataset(directory, subjects: Sequence[Subject], cfg: DataConfig, seed: int) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        write_arrays(directory / _subject_file(s.id),
                     [s.volume, s.mask.astype(np.float64), s.patches, s.u])
    manifest = {
        "format": "sghfnet-dataset/1",
        "seed": int(seed),
        "config": config_to_dict(cfg),
        "ids": [s.id for s in subjects],
        "labels": [s.label for s in subjects],
        "files": [_subject_file(s.id) for s in subjects],
        "shapes": {"volume": list(cfg.volume_shape),
                   "patches": [cfg.patches_per_subject, cfg.patch_size, cfg.patch_size]},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory) -> Tuple[List[Subject], DataConfig, dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg = DataConfig(**manifest["config"])
    subjects = []
    for sid, label, fname in zip(manifest["ids"], manifest["labels"], manifest["files"]):
        volume, mask, patches, u = read_arrays(directory / fname)
        subjects.append(Subject(id=int(sid), label=int(label), volume=volume, mask=mask > 0.5,
                                patches=patches, u=u))
    return subjects, cfg, manifest


def config_to_dict(cfg: DataConfig) -> dict:
    d = asdict(cfg)
    d["volume_shape"] = list(cfg.volume_shape)
    d["voi_shape"] = list(cfg.voi_shape)
    return d


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()
