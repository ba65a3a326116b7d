"""Single-file checkpoint container.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, then raw
little-endian tensor payloads at the offsets the header declares. Values
round-trip bit-exactly without any framework serializer.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from .registry import ParamRegistry

MAGIC = b"SAMUSCK1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: "OrderedDict[str, np.ndarray]"  # model state: parameters and buffers
    optimizer: Optional["OrderedDict[str, np.ndarray]"] = None
    optimizer_meta: Optional[dict] = None
    rng_seeds: dict = field(default_factory=dict)
    task_ids: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    # ascontiguousarray promotes 0-d to 1-d; restore the true shape
    return np.ascontiguousarray(arr).reshape(arr.shape)


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> None:
    tensors = []
    payload = bytearray()

    def add(prefix: str, name: str, arr: np.ndarray) -> None:
        arr = _le(arr)
        raw = arr.tobytes()
        tensors.append(
            {
                "name": f"{prefix}{name}",
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)

    for name, arr in ck.params.items():
        add("", name, arr)
    if ck.optimizer is not None:
        for name, arr in ck.optimizer.items():
            add("optimizer::", name, arr)

    header = {
        "format_version": ck.format_version,
        "config": ck.config,
        "rng_seeds": ck.rng_seeds,
        "task_ids": ck.task_ids,
        "has_optimizer": ck.optimizer is not None,
        "optimizer_meta": ck.optimizer_meta,
        "tensors": tensors,
    }
    raw_header = json.dumps(header).encode("utf-8")

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw_header)))
        f.write(raw_header)
        f.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a recognized checkpoint file")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header['format_version']}"
        )
    payload = blob[16 + header_len :]

    params: OrderedDict[str, np.ndarray] = OrderedDict()
    optimizer: OrderedDict[str, np.ndarray] = OrderedDict()
    for meta in header["tensors"]:
        start = meta["offset"]
        arr = np.frombuffer(
            payload, dtype=np.dtype(meta["dtype"]), count=int(np.prod(meta["shape"], dtype=np.int64)), offset=start
        ).reshape(meta["shape"]).copy()
        name = meta["name"]
        if name.startswith("optimizer::"):
            optimizer[name[len("optimizer::") :]] = arr
        else:
            params[name] = arr

    return Checkpoint(
        config=header["config"],
        params=params,
        optimizer=optimizer if header.get("has_optimizer") else None,
        optimizer_meta=header.get("optimizer_meta"),
        rng_seeds=header.get("rng_seeds", {}),
        task_ids=header.get("task_ids", {}),
        format_version=header["format_version"],
    )


def optimizer_to_arrays(
    optimizer: torch.optim.Optimizer, model: nn.Module
) -> tuple[OrderedDict, dict]:
    """Flatten optimizer state to name -> array, keyed by parameter name.

    Adam keeps exp_avg / exp_avg_sq / step per parameter; they become
    "<param name>.exp_avg" and so on. Hyperparameters go to the meta dict.
    """
    id_to_name = {id(p): n for n, p in model.named_parameters()}
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = id_to_name.get(id(p))
            if name is None:
                raise CheckpointError("optimizer tracks a parameter not in the model")
            for key, val in state.items():
                if torch.is_tensor(val):
                    arrays[f"{name}.{key}"] = val.detach().cpu().numpy().copy()
                else:
                    arrays[f"{name}.{key}"] = np.asarray(val)
    meta = {
        "type": type(optimizer).__name__,
        "param_groups": [
            {k: v for k, v in g.items() if k != "params"}
            for g in optimizer.param_groups
        ],
    }
    return arrays, meta


def checkpoint_from_model(
    model: nn.Module,
    config: dict,
    optimizer: Optional[dict] = None,
    optimizer_meta: Optional[dict] = None,
    rng_seeds: Optional[dict] = None,
    task_ids: Optional[dict] = None,
) -> Checkpoint:
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, tensor in model.state_dict().items():
        params[name] = tensor.detach().cpu().numpy().copy()
    opt_arrays = None
    if optimizer is not None:
        opt_arrays = OrderedDict(
            (k, np.asarray(v).copy()) for k, v in optimizer.items()
        )
    return Checkpoint(
        config=config,
        params=params,
        optimizer=opt_arrays,
        optimizer_meta=optimizer_meta,
        rng_seeds=dict(rng_seeds or {}),
        task_ids=dict(task_ids or {}),
    )


def load_state_into(
    ck: Checkpoint, model: nn.Module, strict: bool = True
) -> tuple[list[str], list[str], list[str]]:
    """Copy checkpoint tensors into matching model state entries.

    Returns (loaded, missing_in_checkpoint, unexpected_in_checkpoint).
    Shape mismatches always raise, reporting both shapes.
    """
    state = model.state_dict()
    loaded, missing, unexpected = [], [], []
    with torch.no_grad():
        for name, target in state.items():
            if name not in ck.params:
                missing.append(name)
                continue
            src = ck.params[name]
            if tuple(src.shape) != tuple(target.shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)} "
                    f"vs model {tuple(target.shape)}"
                )
            target.copy_(torch.from_numpy(src).to(target.dtype))
            loaded.append(name)
    unexpected = [n for n in ck.params if n not in state]
    if strict and (missing or unexpected):
        raise CheckpointError(
            f"state mismatch: missing={missing[:8]}... unexpected={unexpected[:8]}..."
            if len(missing) + len(unexpected) > 16
            else f"state mismatch: missing={missing} unexpected={unexpected}"
        )
    return loaded, missing, unexpected


@dataclass
class ImportReport:
    mapped: list  # (source_name, target_name) pairs actually copied
    fresh: list   # target entries left at their module init
    missing_source: list  # mapped source names absent from the checkpoint


def import_sam_layout(
    source: Checkpoint, name_map: Mapping[str, str], model: nn.Module
) -> tuple[ParamRegistry, ImportReport]:
    """Copy tensors from a SAM-style checkpoint into a freshly built model.

    ``name_map`` maps source names to target state names. Unmapped target
    entries keep their module's own initialization. A shape mismatch on any
    mapped name raises with both shapes.
    """
    state = model.state_dict()
    mapped, missing_source = [], []
    with torch.no_grad():
        for src_name, dst_name in name_map.items():
            if src_name not in source.params:
                missing_source.append(src_name)
                continue
            if dst_name not in state:
                raise CheckpointError(f"name_map target {dst_name!r} not in model state")
            src = source.params[src_name]
            dst = state[dst_name]
            if tuple(src.shape) != tuple(dst.shape):
                raise CheckpointError(
                    f"shape mismatch mapping {src_name!r} -> {dst_name!r}: "
                    f"source {tuple(src.shape)} vs target {tuple(dst.shape)}"
                )
            dst.copy_(torch.from_numpy(src).to(dst.dtype))
            mapped.append((src_name, dst_name))
    if missing_source:
        raise CheckpointError(
            f"name_map sources absent from checkpoint: {missing_source}"
        )
    fresh = [n for n in state if n not in {d for _, d in mapped}]
    report = ImportReport(mapped=mapped, fresh=fresh, missing_source=missing_source)
    return ParamRegistry.from_model(model), report
