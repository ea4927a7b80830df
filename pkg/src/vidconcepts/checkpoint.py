"""Checkpoint archive: one ``.npz`` of named arrays plus a JSON metadata entry.

Parameters live under ``model/<name>`` and SGD momentum buffers under
``optim/<name>``; loading matches by name so missing or extra entries are
reported instead of failing on position.
"""
from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError

FORMAT = "vidconcepts-checkpoint/1"
META_KEY = "__meta__"


def _to_numpy(t):
    return t.detach().cpu().numpy().copy()


def state_arrays(model, optimizer=None):
    arrays = {f"model/{k}": _to_numpy(v) for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}"] = _to_numpy(buf)
    return arrays


def save_checkpoint(path, model, config=None, optimizer=None, epoch=0, step=0, extra=None):
    """Write atomically: the previous file at ``path`` survives a failed write."""
    arrays = state_arrays(model, optimizer)
    meta = {
        "format": FORMAT,
        "epoch": int(epoch),
        "step": int(step),
        "config": config.to_dict() if hasattr(config, "to_dict") else config,
        "shapes": {k: list(v.shape) for k, v in sorted(arrays.items())},
    }
    if extra:
        meta["extra"] = extra
    payload = {k: arrays[k] for k in sorted(arrays)}
    payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise InvalidInputError(f"{path} is not a checkpoint archive")
        meta = json.loads(str(z[META_KEY]))
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    return arrays, meta


def load_into(model, arrays, optimizer=None, strict=True):
    """Copy named arrays into ``model`` (and momentum buffers into ``optimizer``).

    Returns ``(missing, unexpected)`` parameter names.
    """
    state = model.state_dict()
    model_arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    missing = sorted(set(state) - set(model_arrays))
    unexpected = sorted(set(model_arrays) - set(state))
    if strict and (missing or unexpected):
        raise InvalidInputError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
    with torch.no_grad():
        for name, value in model_arrays.items():
            if name not in state:
                continue
            if tuple(state[name].shape) != value.shape:
                raise InvalidInputError(
                    f"shape mismatch for {name}: {tuple(state[name].shape)} vs {value.shape}")
            state[name].copy_(torch.from_numpy(value))
    if optimizer is not None:
        params = dict(model.named_parameters())
        for key, value in arrays.items():
            if key.startswith("optim/") and key[len("optim/"):] in params:
                p = params[key[len("optim/"):]]
                optimizer.state[p]["momentum_buffer"] = torch.from_numpy(value.copy()).to(p.dtype)
    return missing, unexpected


def restore(path, dtype=torch.float32):
    """Rebuild the model (and its experiment config) stored in a checkpoint."""
    from .config import ExperimentConfig
    from .model import build_model

    arrays, meta = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg).to(dtype)
    load_into(model, arrays)
    model.eval()
    return model, cfg, meta
