"""Binary checkpoint format.

Layout: magic ``MOHD``, little-endian u32 format version, u32 byte length
plus a UTF-8 JSON block (config snapshot, step counter, RNG state), then a
tensor table read until EOF. Each entry is u32 name length, the UTF-8 name,
u32 rank, u32 dims, and the row-major float64 payload, all little-endian.
Optimizer moments live in the same table under ``opt.m.`` / ``opt.v.``
prefixes; model tensors under ``model.``.

Float64 payloads round-trip bit-exactly, so a saved and reloaded model
reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

MAGIC = b"MOHD"
VERSION = 1

_MODEL_PREFIX = "model."
_M_PREFIX = "opt.m."
_V_PREFIX = "opt.v."


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    version: int
    config: dict
    step: int
    rng_state: dict
    model: dict[str, Array]
    moments_m: dict[str, Array]
    moments_v: dict[str, Array]


def _write_tensor(fh, name: str, value: Array) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", value.ndim))
    fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
    fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def save_checkpoint(
    path: str,
    config: dict,
    step: int,
    rng_state: dict,
    model: dict[str, Array],
    moments_m: dict[str, Array] | None = None,
    moments_v: dict[str, Array] | None = None,
) -> None:
    header = json.dumps({"config": config, "step": step, "rng_state": rng_state})
    blob = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(model):
            _write_tensor(fh, _MODEL_PREFIX + name, model[name])
        for prefix, table in ((_M_PREFIX, moments_m), (_V_PREFIX, moments_v)):
            for name in sorted(table or {}):
                _write_tensor(fh, prefix + name, table[name])


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

        model: dict[str, Array] = {}
        moments_m: dict[str, Array] = {}
        moments_v: dict[str, Array] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise CheckpointError("truncated checkpoint file")
            (name_len,) = struct.unpack("<I", raw)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 8 * count)
            value = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith(_M_PREFIX):
                moments_m[name[len(_M_PREFIX):]] = value
            elif name.startswith(_V_PREFIX):
                moments_v[name[len(_V_PREFIX):]] = value
            elif name.startswith(_MODEL_PREFIX):
                model[name[len(_MODEL_PREFIX):]] = value
            else:
                raise CheckpointError(f"unknown tensor table entry {name!r}")
    return Checkpoint(
        version=version,
        config=header["config"],
        step=header["step"],
        rng_state=header["rng_state"],
        model=model,
        moments_m=moments_m,
        moments_v=moments_v,
    )
