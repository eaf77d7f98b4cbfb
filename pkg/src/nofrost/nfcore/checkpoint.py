"""Single-file checkpoints: one .npz archive with weights, statistic banks, metadata.

Format (version 1): every ``state_dict`` entry is stored as an array under
``state::<key>`` (this covers parameters, plain-BN running stats, and both
mixture-BN banks), and a ``__meta__`` uint8 array holds a JSON blob with the
model config plus caller metadata (method, norm strategy, config hash, seed,
epoch).  Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .models import ModelConfig, ResidualClassifier

CHECKPOINT_FORMAT = 1
_STATE_PREFIX = "state::"
_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, incomplete, or inconsistent."""


def _encode_meta(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["norm"] = cfg.norm.value
    return d


def save_checkpoint(model: ResidualClassifier, path, metadata: dict | None = None) -> Path:
    """Write model weights + statistics + metadata as one .npz archive."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": model_config_to_dict(model.cfg),
        "metadata": dict(metadata or {}),
    }
    arrays = {_STATE_PREFIX + k: v.detach().cpu().numpy()
              for k, v in model.state_dict().items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_META_KEY: _encode_meta(meta)})
    return path


def read_metadata(path) -> dict:
    """Metadata blob of a checkpoint without instantiating the model."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            if _META_KEY not in archive:
                raise CheckpointError(f"{path}: no metadata entry; not a model checkpoint")
            raw = archive[_META_KEY].tobytes().decode("utf-8")
    except CheckpointError:
        raise
    except Exception as exc:  # zipfile/OS errors -> one error type for callers
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupted metadata JSON: {exc}") from exc


def load_checkpoint(path) -> tuple[ResidualClassifier, dict]:
    """Rebuild the model from a checkpoint; returns (model, caller metadata).

    The stored arrays must match the rebuilt model's state dict exactly;
    missing or unexpected entries raise :class:`CheckpointError` naming them.
    """
    meta = read_metadata(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    cfg = ModelConfig(**meta["model"])
    model = ResidualClassifier(cfg)
    expected = set(model.state_dict().keys())
    state = {}
    try:
        with np.load(path, allow_pickle=False) as archive:
            stored = {k[len(_STATE_PREFIX):] for k in archive.files if k.startswith(_STATE_PREFIX)}
            missing = sorted(expected - stored)
            unexpected = sorted(stored - expected)
            if missing or unexpected:
                raise CheckpointError(
                    f"{path}: state mismatch; missing={missing} unexpected={unexpected}")
            for key in stored:
                state[key] = torch.from_numpy(np.array(archive[_STATE_PREFIX + key]))
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("metadata", {})


def save_trainer_state(path, arrays: dict, extra: dict) -> Path:
    """Sidecar archive for resumable training (optimizer tensors, RNG states)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    packed = {f"t::{k}": np.asarray(v) for k, v in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, **packed, **{_META_KEY: _encode_meta({"extra": extra})})
    return path


def load_trainer_state(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k[3:]: np.array(archive[k]) for k in archive.files if k.startswith("t::")}
            extra = json.loads(archive[_META_KEY].tobytes().decode("utf-8"))["extra"]
    except Exception as exc:
        raise CheckpointError(f"cannot read trainer state {path}: {exc}") from exc
    return arrays, extra
