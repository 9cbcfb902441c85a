"""Binary parameter checkpoints.

One flat format for every ParamSet in the package: a magic tag, a JSON
block with the resolved run configuration, then named entries with shapes
and little-endian float64 data. The checkpoint id is a digest of the
entries alone, so two runs that land on identical weights share an id
regardless of bookkeeping differences.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import ParamSet

__all__ = ["save_params", "load_params", "checkpoint_id_of"]

CHECKPOINT_MAGIC = b"MCNP"
CHECKPOINT_VERSION = 1


def _entry_bytes(params: ParamSet) -> bytes:
    chunks: list[bytes] = []
    for name, node in params.items():
        raw = name.encode("utf-8")
        chunks.append(np.array([len(raw)], dtype="<u4").tobytes())
        chunks.append(raw)
        shape = node.values.shape
        chunks.append(np.array([len(shape), *shape], dtype="<u4").tobytes())
        chunks.append(node.values.astype("<f8").tobytes())
    return b"".join(chunks)


def checkpoint_id_of(params: ParamSet) -> str:
    return hashlib.sha256(_entry_bytes(params)).hexdigest()[:16]


def save_params(path: str, params: ParamSet, config_echo: dict) -> str:
    """Write a checkpoint; returns its id."""
    config_blob = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.array([CHECKPOINT_VERSION, len(params), len(config_blob)], dtype="<u4").tobytes())
        fh.write(config_blob)
        fh.write(_entry_bytes(params))
    return checkpoint_id_of(params)


def load_params(path: str) -> tuple[ParamSet, dict, str]:
    """Read a checkpoint; returns (params, config echo, checkpoint id)."""
    with open(path, "rb") as fh:
        payload = fh.read()
    if payload[:4] != CHECKPOINT_MAGIC:
        raise ValueError(
            f"checkpoint file {path!r}: bad magic {payload[:4]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    version, n_entries, config_len = (
        int(x) for x in np.frombuffer(payload, dtype="<u4", count=3, offset=4)
    )
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint file {path!r}: format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    offset = 16
    config_echo = json.loads(payload[offset:offset + config_len].decode("utf-8"))
    offset += config_len
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = np.frombuffer(payload, dtype="<u4", count=1, offset=offset)
        offset += 4
        name = payload[offset:offset + int(name_len)].decode("utf-8")
        offset += int(name_len)
        (ndim,) = np.frombuffer(payload, dtype="<u4", count=1, offset=offset)
        offset += 4
        shape = tuple(int(x) for x in np.frombuffer(payload, dtype="<u4", count=int(ndim), offset=offset))
        offset += 4 * int(ndim)
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        entries[name] = values.copy()
    if offset != len(payload):
        raise ValueError(f"checkpoint file {path!r}: {len(payload) - offset} trailing bytes")
    params = ParamSet(entries)
    return params, config_echo, checkpoint_id_of(params)
