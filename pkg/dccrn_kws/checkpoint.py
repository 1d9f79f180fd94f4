# dccrn_kws/checkpoint.py
"""Checkpoint file format.

Layout::

    b"DCCRNKWS-CKPT v1\\n"
    <uint64 little-endian header length>
    <JSON header: version, config hash, iteration, config, tensor table>
    <raw little-endian tensor payloads, in table order>

Floating tensors are stored as float32 and integer buffers as int64. The header
is serialised with sorted keys so identical state gives identical bytes.
"""
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import orjson
import torch
import torch.nn as nn

from dccrn_kws.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DCCRNKWS-CKPT v1\n"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optimizer."
_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8")}


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    config_hash: str
    iteration: int
    config: Dict[str, Any]
    meta: Dict[str, Any]

    def model_state(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}


def _encode(tensor: torch.Tensor):
    t = tensor.detach().cpu()
    if t.is_floating_point():
        return "float32", t.numpy().astype(_DTYPES["float32"])
    if t.dtype in (torch.int64, torch.int32, torch.int16, torch.int8, torch.uint8, torch.bool):
        return "int64", t.numpy().astype(_DTYPES["int64"])
    raise CheckpointError(f"cannot store tensor of dtype {t.dtype}")


def save_checkpoint(
    path: Path,
    tensors: Dict[str, torch.Tensor],
    config_hash: str,
    iteration: int = 0,
    config: Optional[Dict[str, Any]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    table, payloads, offset = [], [], 0
    for name, tensor in tensors.items():
        dtype, array = _encode(tensor)
        raw = np.ascontiguousarray(array).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = orjson.dumps(
        {
            "version": FORMAT_VERSION,
            "config_hash": config_hash,
            "iteration": int(iteration),
            "config": config or {},
            "meta": meta or {},
            "tensors": table,
        },
        option=orjson.OPT_SORT_KEYS,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)
    logger.info(f"💾 Checkpoint saved: {path} (iteration {iteration}, {len(table)} tensors)")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path} is truncated")
    (header_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = orjson.loads(blob[pos:pos + header_len])
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data_start = pos + header_len
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {entry['name']} has unknown dtype {entry['dtype']}")
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: payload of {entry['name']} runs past end of file")
        array = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())
    return Checkpoint(
        tensors=tensors,
        config_hash=header["config_hash"],
        iteration=header["iteration"],
        config=header.get("config", {}),
        meta=header.get("meta", {}),
    )


def optimizer_tensors(optimizer: torch.optim.Optimizer, model: nn.Module) -> Dict[str, torch.Tensor]:
    """Adam moments and step counts keyed by parameter name."""
    names = {id(p): n for n, p in model.named_parameters()}
    out: Dict[str, torch.Tensor] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            for key, value in sorted(state.items()):
                if not torch.is_tensor(value):
                    value = torch.tensor(float(value))
                out[f"{OPTIMIZER_PREFIX}{names[id(p)]}.{key}"] = value
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    restored = 0
    for name, tensor in ckpt.tensors.items():
        if not name.startswith(OPTIMIZER_PREFIX):
            continue
        param_name, key = name[len(OPTIMIZER_PREFIX):].rsplit(".", 1)
        if param_name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter '{param_name}'")
        p = params[param_name]
        value = tensor.to(torch.float32) if key == "step" else tensor.to(p.dtype)
        optimizer.state[p][key] = value
        restored += 1
    logger.info(f"Restored {restored} optimizer tensors")


def save_model(
    path: Path,
    model: nn.Module,
    config_hash: str,
    iteration: int = 0,
    config: Optional[Dict[str, Any]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer, model))
    return save_checkpoint(path, tensors, config_hash, iteration, config, meta)


def restore_model(model: nn.Module, ckpt: Checkpoint, expected_hash: Optional[str] = None) -> None:
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CheckpointError(
            f"checkpoint config hash {ckpt.config_hash} does not match run config {expected_hash}"
        )
    own = model.state_dict()
    state = ckpt.model_state()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint tensors do not fit model: missing {missing[:5]}, unexpected {unexpected[:5]}")
    converted = {}
    for name, value in state.items():
        if tuple(value.shape) != tuple(own[name].shape):
            raise CheckpointError(f"tensor {name} has shape {tuple(value.shape)}, model expects {tuple(own[name].shape)}")
        converted[name] = value.to(own[name].dtype)
    model.load_state_dict(converted)
