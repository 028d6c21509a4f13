"""Self-describing checkpoint files with an integrity hash.

Layout: 8-byte magic, 8-byte big-endian payload length, 32-byte sha256 of the
payload, then the ``torch.save`` payload holding ``arch_spec`` and the state dict.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import torch

from ..core import ModelBundle, NTLError, build_model

MAGIC = b"NTLCKPT1"
_HEADER = len(MAGIC) + 8 + 32


class CheckpointError(NTLError):
    pass


def save_checkpoint(model: ModelBundle, path: str | Path) -> Path:
    buf = io.BytesIO()
    torch.save({"arch_spec": dict(model.arch_spec), "state_dict": model.state_dict()}, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack(">Q", len(payload)) + hashlib.sha256(payload).digest() + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_arch: dict | None = None) -> ModelBundle:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file or header truncated")
    (length,) = struct.unpack(">Q", raw[len(MAGIC):len(MAGIC) + 8])
    digest = raw[len(MAGIC) + 8:_HEADER]
    payload = raw[_HEADER:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {length}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: payload hash mismatch")
    blob = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    arch = blob["arch_spec"]
    if expected_arch is not None:
        want = {k: v for k, v in expected_arch.items() if k != "feature_dim"}
        have = {k: arch.get(k) for k in want}
        if have != want:
            raise CheckpointError(f"architecture mismatch: checkpoint has {arch}, expected {expected_arch}")
    model = build_model({k: v for k, v in arch.items() if k != "feature_dim"}, seed=0)
    model.load_state_dict(blob["state_dict"])
    return model
