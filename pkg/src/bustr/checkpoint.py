"""Binary checkpoint format: JSON header + raw little-endian float32 parameter blob."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import torch

from .errors import MissingFile, SchemaMismatch

MAGIC = b"BCKP"


def save_checkpoint(path: str | Path, header: dict, state: dict[str, torch.Tensor]) -> Path:
    """Serialize a header dict and a float32 state dict into one binary file."""
    path = Path(path)
    meta = [[name, list(tensor.shape)] for name, tensor in state.items()]
    doc = dict(header, params=meta)
    header_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    blob = b"".join(
        tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        for tensor in state.values()
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Inverse of save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise SchemaMismatch(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    state: dict[str, torch.Tensor] = {}
    offset = 8 + header_len
    import numpy as np

    for name, shape in header.pop("params"):
        count = 1
        for dim in shape:
            count *= dim
        end = offset + 4 * count
        if end > len(raw):
            raise SchemaMismatch(f"{path} is truncated at parameter {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
        offset = end
    if offset != len(raw):
        raise SchemaMismatch(f"{path} has {len(raw) - offset} trailing bytes")
    return header, state


def state_hash(state: dict[str, torch.Tensor]) -> str:
    """sha256 over parameter names and exact float32 bytes, for frozen-weight audits."""
    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode("utf-8"))
        digest.update(state[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(dict(module.state_dict()))
