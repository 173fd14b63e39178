"""Binary checkpoint format.

Layout::

    b"DGNM" | version (1 byte) | manifest length (uint64 LE) | manifest (UTF-8 JSON) | payload

The payload is the concatenation of little-endian float32 tensors in manifest
order. Each manifest entry records name, shape, dtype, byte offset, byte
count, trainable flag, group and the SHA-256 of its bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"DGNM"
VERSION = 1
DISK_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Corrupt, truncated or incomplete checkpoint."""


def tensor_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=DISK_DTYPE).tobytes()).hexdigest()


@dataclass
class Checkpoint:
    model_config: dict
    stage: int
    step: int
    tensors: Dict[str, np.ndarray]
    trainable: Dict[str, bool] = field(default_factory=dict)
    groups: Dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if self.groups.get(k, "param") == "param"}

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype=DISK_DTYPE).tobytes()
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "float32",
                    "offset": offset,
                    "nbytes": len(raw),
                    "trainable": bool(self.trainable.get(name, True)),
                    "group": self.groups.get(name, "param"),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "format_version": VERSION,
            "model_config": self.model_config,
            "stage": self.stage,
            "step": self.step,
            "tensors": entries,
            "extra": self.extra,
        }
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, verify: bool = True) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        if len(data) < 13:
            raise CheckpointError("truncated header")
        if data[4] != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {data[4]}")
        (mlen,) = struct.unpack("<Q", data[5:13])
        try:
            manifest = json.loads(data[13 : 13 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable manifest: {exc}") from exc
        payload = memoryview(data)[13 + mlen :]
        tensors, trainable, groups = {}, {}, {}
        expected = 0
        for e in manifest["tensors"]:
            if e["offset"] != expected:
                raise CheckpointError(f"{e['name']}: offset {e['offset']} out of order (expected {expected})")
            raw = bytes(payload[e["offset"] : e["offset"] + e["nbytes"]])
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"{e['name']}: payload truncated")
            if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise CheckpointError(f"{e['name']}: hash mismatch")
            tensors[e["name"]] = np.frombuffer(raw, dtype=DISK_DTYPE).reshape(e["shape"]).copy()
            trainable[e["name"]] = e["trainable"]
            groups[e["name"]] = e["group"]
            expected += e["nbytes"]
        return cls(
            model_config=manifest["model_config"],
            stage=manifest["stage"],
            step=manifest["step"],
            tensors=tensors,
            trainable=trainable,
            groups=groups,
            extra=manifest.get("extra", {}),
        )

    def save(self, path, overwrite: bool = True) -> None:
        path = Path(path)
        if path.exists() and not overwrite:
            raise FileExistsError(f"{path} exists (pass overwrite to replace it)")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def read_manifest(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (mlen,) = struct.unpack("<Q", data[5:13])
    return json.loads(data[13 : 13 + mlen].decode("utf-8"))


def require(ckpt: Checkpoint, names, what: str = "model") -> None:
    missing = [n for n in names if n not in ckpt.tensors]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise CheckpointError(f"checkpoint is missing {len(missing)} {what} tensors: {shown}")

