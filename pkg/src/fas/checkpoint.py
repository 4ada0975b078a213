"""Versioned binary checkpoints.

Layout (little endian)::

    magic       4s   b"FASC"
    version     u16
    header_len  u32
    header      UTF-8 JSON (configs, epoch, optimizer scalars, RNG states,
                history, tensor table)
    payload     float64 tensors in tensor-table order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import FasConfig, param_shapes
from .optim import AdamWState

MAGIC = b"FASC"
VERSION = 1
PREFIX = struct.Struct("<4sHI")


@dataclass
class Checkpoint:
    fas_config: FasConfig
    train_config: dict
    params: dict[str, np.ndarray]
    optimizer: AdamWState
    epoch: int = 0
    rng_states: dict[str, dict] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def _tensors(ckpt: Checkpoint):
    for group, source in (("param", ckpt.params), ("m", ckpt.optimizer.m), ("v", ckpt.optimizer.v)):
        for name in param_shapes(ckpt.fas_config):
            yield group, name, source[name]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    opt = ckpt.optimizer
    table, chunks = [], []
    for group, name, arr in _tensors(ckpt):
        table.append({"group": group, "name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "fas_config": ckpt.fas_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "optimizer": {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay, "step": opt.step,
        },
        "rng_states": ckpt.rng_states,
        "history": ckpt.history,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_header(raw: bytes, source="<bytes>") -> dict:
    if len(raw) < PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint prefix", "header")
    magic, version, head_len = PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r} (FASC)", "magic")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}", "version")
    end = PREFIX.size + head_len
    if len(raw) < end:
        raise CheckpointError(f"{source}: truncated checkpoint header", "header")
    try:
        return json.loads(raw[PREFIX.size:end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint header: {exc}", "header") from None


def decode_checkpoint(raw: bytes, source="<bytes>") -> Checkpoint:
    header = read_header(raw, source)
    cfg = FasConfig.from_dict(header["fas_config"])
    shapes = param_shapes(cfg)
    offset = PREFIX.size + PREFIX.unpack_from(raw)[2]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shapes.get(name) != shape:
            raise CheckpointError(
                f"{source}: tensor {name} has shape {shape}, config implies {shapes.get(name)}", name
            )
        nbytes = 8 * math.prod(shape)
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{source}: checkpoint payload truncated at tensor {name}", "payload")
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset)
        groups[entry["group"]][name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes", "payload")
    for group, tensors in groups.items():
        missing = set(shapes) - set(tensors)
        if missing:
            raise CheckpointError(f"{source}: missing {group} tensors {sorted(missing)}", sorted(missing)[0])
    o = header["optimizer"]
    opt = AdamWState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["step"],
                     groups["m"], groups["v"])
    return Checkpoint(cfg, header["train_config"], groups["param"], opt, header["epoch"],
                      header["rng_states"], header["history"])


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), source=path)
