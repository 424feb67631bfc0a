"""Checkpoint container.

Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON header, then the raw
tensor blob.  Tensors are row-major little-endian float32; the header lists each tensor's name,
shape and byte offset, the encoder config, and the optimizer hyperparameters and moments.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpoint
from .model import EncoderConfig, EncoderModel
from .optim import AdamState

MAGIC = b"ATSCCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    model: EncoderModel
    state: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def checkpoint_bytes(model: EncoderModel, state: AdamState | None = None, meta: dict | None = None) -> bytes:
    blob = bytearray()
    tensors = []
    for name, p in model.named_parameters():
        raw = _f32(p)
        tensors.append({"name": name, "shape": list(p.shape), "offset": len(blob)})
        blob += raw
    optimizer = None
    # a state that never stepped carries no information and serializes like no state
    if state is not None and state.t > 0:
        moments = []
        for kind, store in (("m", state.m), ("v", state.v)):
            for name in sorted(store):
                moments.append({"name": name, "kind": kind, "shape": list(store[name].shape),
                                "offset": len(blob)})
                blob += _f32(store[name])
        optimizer = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                     "t": state.t, "moments": moments}
    header = json.dumps({"version": VERSION, "config": model.config.to_dict(), "dtype": "float32",
                         "tensors": tensors, "optimizer": optimizer, "meta": meta or {}},
                        sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + bytes(blob)


def save_checkpoint(path: str | Path, model: EncoderModel, state: AdamState | None = None,
                    meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, state, meta))


def _tensor(blob: memoryview, offset: int, shape: list[int]) -> torch.Tensor:
    count = int(np.prod(shape)) if shape else 1
    if offset < 0 or offset + 4 * count > len(blob):
        raise CorruptCheckpoint("tensor extends past end of file")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def load_checkpoint_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CorruptCheckpoint("bad magic")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        header = json.loads(data[16:16 + hlen])
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpoint("unreadable header") from exc
    if version != VERSION or header.get("version") != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    blob = memoryview(data)[16 + hlen:]
    model = EncoderModel(EncoderConfig(**header["config"]))
    params = dict(model.named_parameters())
    if {t["name"] for t in header["tensors"]} != set(params):
        raise CorruptCheckpoint("parameter names do not match the encoder config")
    with torch.no_grad():
        for t in header["tensors"]:
            value = _tensor(blob, t["offset"], t["shape"])
            if value.shape != params[t["name"]].shape:
                raise CorruptCheckpoint(f"shape mismatch for {t['name']}")
            params[t["name"]].copy_(value)
    state = None
    opt = header.get("optimizer")
    if opt:
        state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], t=opt["t"])
        for mom in opt["moments"]:
            getattr(state, mom["kind"])[mom["name"]] = _tensor(blob, mom["offset"], mom["shape"])
    return Checkpoint(model, state, header.get("meta", {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return load_checkpoint_bytes(path.read_bytes())
