"""TATC1 checkpoints: JSON header with a name -> offset table, then one flat buffer."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .models import Policy, PolicyConfig

MAGIC = b"TATC1"


def save_checkpoint(path, policy: Policy, train_config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name, t in policy.params.items():
        raw = np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "offset": offset, "nbytes": len(raw),
                      "shape": list(t.shape), "dtype": t.data.dtype.name})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "TATC1",
        "policy": policy.config.to_dict(),
        "seed": policy.config.seed,
        "train": train_config or {},
        "extra": extra or {},
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse(raw, path)[0]


def _parse(raw: bytes, path) -> tuple[dict, int]:
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a TATC1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + n].decode())
    return header, 9 + n


def load_checkpoint(path) -> tuple[Policy, dict]:
    """Rebuild the policy and return it with the header."""
    raw = Path(path).read_bytes()
    header, base = _parse(raw, path)
    policy = Policy(PolicyConfig(**header["policy"]))
    names = {e["name"] for e in header["tensors"]}
    if names != set(policy.params):
        missing = sorted(set(policy.params) - names)
        unknown = sorted(names - set(policy.params))
        raise ValueError(f"{path}: parameter mismatch, missing {missing[:3]}, unknown {unknown[:3]}")
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=base + e["offset"])
        p = policy.params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise ValueError(f"{path}: {e['name']} has shape {e['shape']}, model expects {p.shape}")
        p.data = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return policy, header
