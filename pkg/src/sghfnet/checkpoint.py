"""JSON checkpoints: a flat map from parameter name to shape and row-major values.

Key naming is the dotted attribute path inside the model, e.g.::

    rfem.stem.kernel                 first conv of the radiological encoder
    rfem.blocks.0.bn1.running_mean   batch-norm buffer of residual block 0
    hidden.w / hidden.b / out.w      fusion head
    generator.encoder.head.w         frozen generator, stored under ``generator.``

Floats are written with Python's shortest round-trip repr, so a save/load
cycle is exact and identical models give byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .nn_layers import Module

FORMAT = "sghfnet-checkpoint/1"


class CheckpointError(ValueError):
    """Malformed checkpoint or mismatch with the model it is loaded into."""


def encode_state(state: Dict[str, np.ndarray]) -> dict:
    return {name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(state.items())}


def decode_state(tensors: dict) -> Dict[str, np.ndarray]:
    out = {}
    for name, entry in tensors.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            arr = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad tensor entry {name!r}: {exc}") from exc
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name!r}: {arr.size} values for shape {shape}")
        out[name] = arr.reshape(shape)
    return out


def save_state(path, state: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {"format": FORMAT, "meta": meta or {}, "tensors": encode_state(state)}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_state(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    return decode_state(doc["tensors"]), doc.get("meta", {})


def module_state(module: Module, extra: Dict[str, Module] | None = None) -> Dict[str, np.ndarray]:
    """State of ``module`` plus prefixed state of private sub-models (e.g. the frozen generator)."""
    state = module.state_dict()
    for prefix, sub in (extra or {}).items():
        if sub is not None:
            state.update({f"{prefix}.{k}": v for k, v in sub.state_dict().items()})
    return state


def split_state(state: Dict[str, np.ndarray], prefix: str) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Separate keys under ``prefix.`` (returned second, prefix stripped) from the rest."""
    inner = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
    outer = {k: v for k, v in state.items() if not k.startswith(prefix + ".")}
    return outer, inner


def load_into(module: Module, state: Dict[str, np.ndarray]) -> None:
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
