"""Checkpoint archive.

A checkpoint is a zip file with two members:

``manifest.json``
    ``format``, ``model_config``, ``class_set``, ``epoch``, ``seed``, an
    ordered ``tensors`` table of ``{name, shape, dtype}`` and a free-form
    ``extra`` object (training state, RNG state, optimizer step counts).
``tensors.bin``
    Raw little-endian float32 payloads, concatenated in manifest order.

Every tensor is stored as float32; integer buffers are cast back on load using
the recorded ``dtype``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FORMAT = "dctbev-checkpoint/1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    pass


def save_archive(path, tensors: dict[str, torch.Tensor], model_config: dict, class_set,
                 epoch: int, seed: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    table = []
    buf = io.BytesIO()
    for name, t in tensors.items():
        t = t.detach().cpu()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        arr = t.numpy().astype("<f4", copy=False)
        buf.write(np.ascontiguousarray(arr).tobytes())
        table.append({"name": name, "shape": list(t.shape), "dtype": dtype})
    manifest = {
        "format": FORMAT,
        "model_config": model_config,
        "class_set": list(class_set),
        "epoch": int(epoch),
        "seed": int(seed),
        "tensors": table,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("tensors.bin", buf.getvalue())
    tmp.replace(path)
    return path


def load_archive(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Returns ``(manifest, tensors)``; every payload is checked against the
    manifest's shape table."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    tensors = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += nbytes
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return manifest, tensors


def load_into_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "model/") -> None:
    state = module.state_dict()
    expected = set(state)
    got = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    if expected != got:
        missing = sorted(expected - got)[:5]
        unexpected = sorted(got - expected)[:5]
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {unexpected})")
    for name, ref in state.items():
        t = tensors[prefix + name]
        if tuple(t.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {tuple(t.shape)}, model {tuple(ref.shape)}")
    module.load_state_dict({name: tensors[prefix + name].to(ref.dtype) for name, ref in state.items()})
