"""Checkpoint container.

A checkpoint is a single uncompressed zip archive in ``.npz`` layout:

* ``param/<name>.npy``   trained tensors (``LmParameters.arrays``)
* ``buffer/<name>.npy``  fixed tensors such as ensemble anchors
* ``meta.npy``           UTF-8 JSON as a uint8 array with keys ``format``,
  ``version``, ``config`` (flat ``key -> value`` strings, see ``config.py``),
  ``vocab`` (token list, index = id), ``params``/``buffers`` (name lists)
  and ``info`` (free-form run metadata)

Arrays are stored as float64 so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, apply_items, to_items
from .corpus import Vocabulary
from .lstm import LmParameters
from .network import RecurrentLM

FORMAT = "recoding-lm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: RecurrentLM
    vocab: Vocabulary
    config: TrainConfig
    info: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: RecurrentLM, vocab: Vocabulary, config: TrainConfig,
                    info: dict | None = None) -> None:
    if len(vocab) != model.vocab_size:
        raise CheckpointError("vocabulary size does not match the model")
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": to_items(config),
        "vocab": list(vocab.id_to_token),
        "params": list(model.params.arrays),
        "buffers": list(model.params.buffers),
        "info": info or {},
    }
    payload = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    payload.update({f"param/{k}": v for k, v in model.params.arrays.items()})
    payload.update({f"buffer/{k}": v for k, v in model.params.buffers.items()})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
            if meta.get("format") != FORMAT:
                raise CheckpointError(f"{path} is not a recoding-lm checkpoint")
            if meta.get("version") != VERSION:
                raise CheckpointError(
                    f"checkpoint version {meta.get('version')} is not supported (expected {VERSION})")
            arrays = {k: archive[f"param/{k}"] for k in meta["params"]}
            buffers = {k: archive[f"buffer/{k}"] for k in meta["buffers"]}
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    config = apply_items(TrainConfig(), meta["config"])
    vocab = Vocabulary.from_tokens(meta["vocab"])
    model = RecurrentLM(LmParameters(arrays, buffers), config.recoding)
    if len(vocab) != model.vocab_size:
        raise CheckpointError("checkpoint vocabulary does not match its parameters")
    return Checkpoint(model, vocab, config, meta.get("info", {}))
