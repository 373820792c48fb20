"""Binary checkpoint format.

Layout (little endian)::

    b"MTSC" | u32 version=1 | u32 blob_len | blob (UTF-8 JSON: model, train,
    data, state) | u32 n_tensors | n_tensors x (u32 name_len | name | u32 rank
    | rank x u32 dim | float32 payload)

Tensors are network parameters, batchnorm buffers and optimiser velocities
(prefixed ``velocity/``). Payloads are float32, so a save of a freshly loaded
checkpoint is byte-identical to the file it came from.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .objectives import SplState
from .training import TrainConfig, TrainLog, TrainState

MAGIC = b"MTSC"
VERSION = 1
VELOCITY_PREFIX = "velocity/"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: nets.ModelConfig
    train_config: TrainConfig
    data_config: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray

    def network(self):
        """Rebuild the network and copy the stored weights and buffers in."""
        net = nets.build(self.model_config, seed=0)
        expected = dict(net.named_tensors())
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {missing[:3]}...")
        for name, p in net.params.items():
            p.data = self._restore(name, p.data.shape)
        for name, b in net.buffers.items():
            b[...] = self._restore(name, b.shape)
        return net

    def train_state(self):
        s = self.state
        spl = SplState(s["spl"]["start_percentile"], s["spl"]["mu"],
                       s["spl"]["pace_lambda"], None, s["spl"]["epochs_seen"])
        velocity = {k[len(VELOCITY_PREFIX):]: v.astype(np.float64)
                    for k, v in self.tensors.items() if k.startswith(VELOCITY_PREFIX)}
        return TrainState(s["epoch"], velocity, spl, TrainLog.from_dicts(s["log"]))

    def _restore(self, name, shape):
        arr = self.tensors[name]
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{name}: stored shape {arr.shape}, network expects {tuple(shape)}")
        return arr.astype(np.float64)


def from_training(net, train_config, state=None, data_config=None):
    state = state or TrainState(spl=SplState(train_config.spl_start_percentile, train_config.spl_mu))
    tensors = {name: np.asarray(a, dtype=np.float32) for name, a in net.named_tensors()}
    for name, v in state.velocity.items():
        tensors[VELOCITY_PREFIX + name] = np.asarray(v, dtype=np.float32)
    spl = state.spl
    state_blob = {
        "epoch": state.epoch,
        "spl": {"start_percentile": spl.start_percentile, "mu": spl.mu,
                "pace_lambda": spl.pace_lambda, "epochs_seen": spl.epochs_seen},
        "log": state.log.to_dicts(),
    }
    return Checkpoint(net.config, train_config, dict(data_config or {}), state_blob, tensors)


def to_bytes(ckpt):
    blob = json.dumps(
        {"model": ckpt.model_config.to_dict(), "train": ckpt.train_config.to_dict(),
         "data": ckpt.data_config, "state": ckpt.state},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(raw):
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, blob_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if pos + blob_len > len(raw):
        raise CheckpointError("checkpoint truncated")
    try:
        meta = json.loads(raw[pos:pos + blob_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt config blob: {exc}") from None
    pos += blob_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise CheckpointError("checkpoint truncated")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims)) * 4
        if pos + size > len(raw):
            raise CheckpointError("checkpoint truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    try:
        model_cfg = nets.ModelConfig.from_dict(meta["model"])
        train_cfg = TrainConfig.from_dict(meta["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"incompatible stored config: {exc}") from None
    return Checkpoint(model_cfg, train_cfg, meta["data"], meta["state"], tensors)


def save(path, ckpt):
    Path(path).write_bytes(to_bytes(ckpt))


def load(path):
    return from_bytes(Path(path).read_bytes())
