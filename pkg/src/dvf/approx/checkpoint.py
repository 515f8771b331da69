"""Parameter checkpoints: a versioned binary blob plus a JSON sidecar of slice names.

Blob layout: ``b"DVFCKPT"``, one version byte, a little-endian uint32 header
length, the UTF-8 JSON header (model config and seeds), then the flat
float64 parameter vector.
"""
import json
import struct
from pathlib import Path

import numpy as np

from dvf.approx.tape import ParameterStore

MAGIC = b"DVFCKPT"
VERSION = 1


def save(path, store, header):
    path = Path(path)
    head = json.dumps({"version": VERSION, "seed": store.seed, "size": len(store), **header}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(head)) + head)
        fh.write(store.values.astype("<f8").tobytes())
    sidecar = {name: [a, b, list(shape)] for name, (a, b, shape) in store.slices.items()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def load(path):
    """Returns ``(store, header)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:7] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    if raw[7] != VERSION:
        raise ValueError(f"unsupported checkpoint version {raw[7]}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    values = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(float)
    if values.size != header["size"]:
        raise ValueError("checkpoint is truncated")
    store = ParameterStore(header["seed"])
    store.values = values
    sidecar = json.loads(path.with_suffix(".json").read_text())
    store.slices = {k: (a, b, tuple(shape)) for k, (a, b, shape) in sidecar.items()}
    return store, header
