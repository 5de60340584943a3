"""Self-describing binary checkpoints.

Layout: 8 magic bytes, little-endian u32 format version, u64 header length,
a UTF-8 JSON header (topology, epoch, RNG state, config, tensor index,
CRC-32 of the payload), then the payload of little-endian float64 tensors.
"""
from dataclasses import dataclass, field
import json
import os
import struct
import zlib

import numpy as np

from .model import Params, Topology

MAGIC = b"EQPCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: Params
    epoch: int
    rng_state: dict = None
    velocity: dict = field(default_factory=dict)
    config: dict = None
    extra: dict = field(default_factory=dict)


def save(path, params, epoch, rng_state=None, velocity=None, config=None, extra=None):
    """Write atomically (temp file + rename)."""
    index, chunks, offset = [], [], 0
    groups = [("param", params.tensors), ("velocity", velocity or {})]
    for group, tensors in groups:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append({"group": group, "name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "topology": params.topology.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "config": config,
        "extra": extra or {},
        "tensors": index,
        "crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + payload)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (reader handles {VERSION})")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[20 + hlen:]
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    groups = {"param": {}, "velocity": {}}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    params = Params(Topology.from_dict(header["topology"]), groups["param"])
    return Checkpoint(params, header["epoch"], header["rng_state"], groups["velocity"],
                      header["config"], header["extra"])
