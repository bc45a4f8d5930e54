"""Versioned binary checkpoint container.

Layout::

    b"SCIQACKP" | u32 version | u64 header length | JSON header | float32 LE payload

The header holds the model config, one ``[name, shape, offset, count]``
entry per parameter and a CRC32 of the payload. Output is a pure function
of (params, config), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError
from .model import ModelConfig, QualityNet

MAGIC = b"SCIQACKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def encode_checkpoint(params: dict, config: ModelConfig) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        entries.append([name, list(arr.shape), offset, int(arr.size)])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = json.dumps(
        {"config": config.to_dict(), "params": entries, "crc32": zlib.crc32(payload)},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def decode_checkpoint(blob: bytes):
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} incompatible with {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = blob[start:]
    expected = sum(4 * e[3] for e in header["params"])
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    params = {}
    for name, shape, offset, count in header["params"]:
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
    return params, ModelConfig.from_dict(header["config"])


def save_checkpoint(params: dict, config: ModelConfig, path) -> None:
    blob = encode_checkpoint(params, config)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def model_params(model: QualityNet) -> dict:
    return {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}


def save_model(model: QualityNet, path) -> None:
    save_checkpoint(model_params(model), model.config, path)


def load_model(path) -> QualityNet:
    params, config = load_checkpoint(path)
    model = QualityNet(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"checkpoint parameter names do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model
