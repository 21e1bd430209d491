"""Checkpoint serialization.

Layout, all little-endian:

    SPI1\n
    {"tensors": [{"name": ..., "dtype": "<f8", "shape": [...]}, ...]}\n
    <raw payload for each tensor, manifest order>
    fingerprint: <hex>\n

The fingerprint ties the weights to the architecture and prior mode they
were trained under; loading refuses a mismatch.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import SpiConfig
from .errors import ContractError
from .fsio import atomic_write_bytes
from .model import ModelParams

MAGIC = b"SPI1\n"


def checkpoint_bytes(params: ModelParams, fingerprint: str) -> bytes:
    entries = []
    payloads = []
    for name, tensor in params.items():
        # ascontiguousarray promotes 0-d to 1-d; keep the true shape
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        entries.append({"name": name, "dtype": "<f8", "shape": list(tensor.data.shape)})
        payloads.append(arr.tobytes())
    manifest = json.dumps({"tensors": entries}, separators=(",", ":")).encode("ascii")
    tail = f"fingerprint: {fingerprint}\n".encode("ascii")
    return MAGIC + manifest + b"\n" + b"".join(payloads) + tail


def save_checkpoint(path: str | Path, params: ModelParams, config: SpiConfig) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, config.fingerprint()))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    """Parse a checkpoint file; returns (arrays by name, stored fingerprint)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise ContractError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(rest[:newline].decode("ascii"))
        entries = manifest["tensors"]
    except (ValueError, KeyError) as err:
        raise ContractError(f"{path}: malformed checkpoint manifest") from err
    cursor = newline + 1
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        if dtype != "<f8":
            raise ContractError(f"{path}: unsupported tensor dtype {dtype!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        payload = rest[cursor:cursor + nbytes]
        if len(payload) != nbytes:
            raise ContractError(f"{path}: truncated payload for tensor {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        cursor += nbytes
    tail = rest[cursor:].decode("ascii", errors="replace")
    if not tail.startswith("fingerprint: ") or not tail.endswith("\n"):
        raise ContractError(f"{path}: missing fingerprint line")
    return arrays, tail[len("fingerprint: "):-1]


def load_checkpoint(path: str | Path, config: SpiConfig) -> ModelParams:
    """Load weights and refuse a config whose fingerprint disagrees."""
    arrays, stored = read_checkpoint(path)
    expected = config.fingerprint()
    if stored != expected:
        raise ContractError(
            f"{path}: checkpoint fingerprint {stored[:12]}... does not match the "
            f"current config {expected[:12]}...; architecture or prior mode differ")
    return ModelParams.from_arrays(config.model, arrays)
