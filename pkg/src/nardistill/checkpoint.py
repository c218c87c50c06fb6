"""Checkpoints: ``manifest.json`` (config, vocab, tensor index, step, extra
metadata) next to ``weights.bin`` holding every tensor as little-endian
float32, parameters first and Adam moments after them.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import ConfigError
from .model import BangModel, ModelConfig
from .tensor import AdamState

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
FORMAT_VERSION = 1


def save_checkpoint(directory: str | Path, model: BangModel, vocab: Vocab | None = None,
                    optim_state: AdamState | None = None, step: int = 0,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, np.ndarray]] = list(model.state_dict().items())
    if optim_state is not None:
        for i in sorted(optim_state.m):
            tensors.append((f"adam.m.{i}", optim_state.m[i]))
            tensors.append((f"adam.v.{i}", optim_state.v[i]))
    index, offset = [], 0
    tmp = directory / (WEIGHTS + ".tmp")
    with open(tmp, "wb") as fh:
        for name, arr in tensors:
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            fh.write(buf)
            offset += len(buf)
    manifest = {
        "format": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": vocab.itos if vocab is not None else None,
        "tensors": index,
        "step": step,
        "adam_t": optim_state.t if optim_state is not None else None,
        "extra": extra or {},
    }
    os.replace(tmp, directory / WEIGHTS)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint manifest {path}: {e}") from e


def load_checkpoint(directory: str | Path) -> tuple[BangModel, Vocab | None, AdamState | None, dict]:
    """Returns ``(model, vocab, optimizer state or None, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("format") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {manifest.get('format')}")
    raw = (directory / WEIGHTS).read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count,
                                              offset=entry["offset"]).reshape(entry["shape"])
    model = BangModel(ModelConfig.from_dict(manifest["config"]))
    model.load_state_dict(arrays)
    vocab = Vocab(manifest["vocab"]) if manifest.get("vocab") else None
    state = None
    if manifest.get("adam_t") is not None:
        state = AdamState()
        state.t = manifest["adam_t"]
        for name, arr in arrays.items():
            if name.startswith("adam."):
                _, kind, i = name.split(".")
                getattr(state, kind)[int(i)] = arr.astype(np.float32)
    return model, vocab, state, manifest
