"""Checkpoint container: a numpy ``.npz`` archive with a JSON header.

Layout::

    __header__            JSON: format, version, model config, schema set,
                          schema fingerprint, step, dtype, train config
    param/<name>          parameter tensors (row-major)
    adam/<name>/<field>   optimizer moments and step counters (optional)
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .model import MdmdModel, ModelConfig
from .schema import SchemaSet, load_schemas

FORMAT = "mdmd-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def save_checkpoint(path: str | Path, model: MdmdModel, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, train_config: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "schema_set": model.schema_set.to_doc(),
        "schema_fingerprint": model.schema_set.fingerprint(),
        "step": int(step),
        "dtype": str(model.dtype).replace("torch.", ""),
        "train_config": train_config,
    }
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    names = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
        names[p] = name
    if optimizer is not None:
        for p, state in optimizer.state.items():
            for key, value in state.items():
                arrays[f"adam/{names[p]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "__header__" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(str(arrays.pop("__header__")))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, arrays


def header_schema_set(header: dict) -> SchemaSet:
    return load_schemas(json.dumps(header["schema_set"]))


def load_model(path: str | Path, expect_fingerprint: str | None = None,
               dtype: torch.dtype | None = None) -> tuple[MdmdModel, dict, dict[str, np.ndarray]]:
    header, arrays = read_checkpoint(path)
    if expect_fingerprint is not None and header["schema_fingerprint"] != expect_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint schema fingerprint {header['schema_fingerprint']} != expected {expect_fingerprint}"
        )
    schema_set = header_schema_set(header)
    dtype = dtype or getattr(torch, header.get("dtype", "float32"))
    model = MdmdModel(ModelConfig.from_dict(header["model_config"]), schema_set, dtype=dtype)
    load_parameters(model, arrays)
    return model, header, arrays


def load_parameters(model: MdmdModel, arrays: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            value = torch.from_numpy(np.ascontiguousarray(arrays[key]))
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: shape {tuple(value.shape)} != {tuple(p.shape)}")
            p.copy_(value.to(p.dtype))


def load_optimizer_state(optimizer: torch.optim.Optimizer, model: MdmdModel, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        prefix = f"adam/{name}/"
        state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
        if state:
            optimizer.state[p] = state
