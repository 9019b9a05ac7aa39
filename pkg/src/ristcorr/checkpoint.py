"""Versioned checkpoint container.

Layout (little endian)::

    b"RISTCKPT"            8-byte magic
    uint32                 format version
    uint64                 header length H
    H bytes                UTF-8 JSON header
    payload                raw tensor bytes, concatenated

The header holds the configs, epoch, RNG state, optimizer hyperparameters, the
SHA-256 and byte length of the payload, and one ``{name, shape, dtype, offset,
nbytes}`` record per tensor.  Tensor names are ``model.<state_dict key>`` and
``optim.<param index>.<state key>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointError, CheckpointVersionError
from .io import atomic_open
from .model import RISTModel

MAGIC = b"RISTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    model: RISTModel
    epoch: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


def save_checkpoint(path, model: RISTModel, optimizer: Optional[torch.optim.Optimizer] = None,
                    epoch: int = 0, train_config: Optional[dict] = None,
                    rng_state: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    tensors = [(f"model.{k}", v) for k, v in model.state_dict().items()]
    param_groups = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, state in sorted(sd["state"].items()):
            for key, value in sorted(state.items()):
                tensors.append((f"optim.{idx}.{key}", torch.as_tensor(value)))
        param_groups = sd["param_groups"]

    records, chunks, offset = [], [], 0
    for name, t in tensors:
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        data = _tensor_bytes(t)
        records.append({"name": name, "shape": list(t.shape), "dtype": _DTYPE_NAMES[t.dtype],
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "epoch": int(epoch),
        "rng_state": rng_state,
        "param_groups": param_groups,
        "meta": meta or {},
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": records,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with atomic_open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    return path


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header") from None
    payload = blob[start:]
    if len(payload) != header.get("payload_nbytes"):
        raise CheckpointError(f"{path}: truncated checkpoint payload "
                              f"({len(payload)} of {header.get('payload_nbytes')} bytes)")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for rec in header["tensors"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        dtype = _DTYPES[rec["dtype"]]
        arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = torch.from_numpy(arr).to(dtype)
    return header, tensors


def load_checkpoint(path) -> Checkpoint:
    header, tensors = _read(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = RISTModel(cfg)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({exc})") from None

    optimizer_state = None
    if header.get("param_groups") is not None:
        per_param: dict = {}
        for name, t in tensors.items():
            if name.startswith("optim."):
                _, idx, key = name.split(".", 2)
                per_param.setdefault(int(idx), {})[key] = t
        groups = header["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        optimizer_state = {"state": per_param, "param_groups": groups}
    return Checkpoint(model, header["epoch"], header["train_config"], optimizer_state,
                      header.get("rng_state"), header.get("meta", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
