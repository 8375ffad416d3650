"""Checkpoint container.

Layout::

    b"DIFFUSE-CKPT\\x00v1\\n"         16-byte magic (format version 1)
    uint64 little-endian            header length in bytes
    header                          UTF-8 JSON, keys sorted
    payload                         float32 little-endian tensors, back to back

The header holds the predictor config, the schedule as a tab-separated
key/value text block, free-form metadata, optimizer scalars, and a tensor
table of (name, group, shape, offset) entries. Groups are ``param``,
``adam_m`` and ``adam_v``.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .predictor import PredictorConfig, PredictorParams
from .schedule import NoiseSchedule

MAGIC = b"DIFFUSE-CKPT\x00v1\n"
assert len(MAGIC) == 16


class CheckpointError(ValueError):
    pass


class Checkpoint:
    def __init__(self, params: PredictorParams, schedule: NoiseSchedule,
                 opt_state=None, metadata: dict | None = None):
        self.params = params
        self.schedule = schedule
        self.opt_state = opt_state
        self.metadata = dict(metadata or {})


def to_bytes(ck: Checkpoint) -> bytes:
    entries, blobs, off = [], [], 0

    def add(name, group, arr):
        nonlocal off
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "group": group, "shape": list(a.shape), "offset": off})
        blobs.append(a.tobytes())
        off += a.nbytes

    for n, v in ck.params.tensors.items():
        add(n, "param", v)
    opt = None
    if ck.opt_state is not None:
        st = ck.opt_state
        for n in ck.params.tensors:
            add(n, "adam_m", st.m[n])
            add(n, "adam_v", st.v[n])
        opt = {"step": int(st.step), "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
    header = {
        "predictor_config": ck.params.config.to_dict(),
        "schedule": ck.schedule.to_text(),
        "metadata": ck.metadata,
        "optimizer": opt,
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def save(ck: Checkpoint, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(to_bytes(ck))
    os.replace(tmp, path)


def from_bytes(data: bytes) -> Checkpoint:
    from .trainer import AdamState  # avoid an import cycle

    if data[:16] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[16:24])
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    payload = memoryview(data)[24 + hlen:]
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        groups[e["group"]][e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    cfg = PredictorConfig.from_dict(header["predictor_config"])
    params = PredictorParams(cfg, groups["param"])
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt = AdamState(groups["adam_m"], groups["adam_v"], o["step"], o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(params, NoiseSchedule.from_text(header["schedule"]), opt, header["metadata"])


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())
