"""Binary checkpoint format.

Layout (little endian)::

    b"DEFCKPT1"
    uint64  header length H
    H bytes UTF-8 JSON header (sorted keys)
    float32 parameters, concatenated in manifest order
    float32 Adam first moments, same order
    float32 Adam second moments, same order

The header carries the format version, the three configs, their hash, the
training step, the Adam step and a manifest of ``{name, shape, offset}``
entries (offsets in floats from the start of the parameter block).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import nn
from .config import ModelConfig, SimConfig, TrainConfig, config_hash
from .model import expected_param_count
from .training import Checkpoint

MAGIC = b"DEFCKPT1"
VERSION = 1


class CorruptCheckpoint(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


def _header(ckpt: Checkpoint) -> dict:
    manifest, off = [], 0
    for name, p in ckpt.params:
        manifest.append({"name": name, "shape": list(p.shape), "offset": off})
        off += p.data.size
    return {
        "version": VERSION,
        "sim": ckpt.sim.model_dump(mode="json"),
        "model": ckpt.model.model_dump(mode="json"),
        "train": ckpt.train.model_dump(mode="json"),
        "config_hash": config_hash(ckpt.model),
        "step": ckpt.step,
        "phase": ckpt.phase,
        "adam_step": ckpt.params.step,
        "n_params": off,
        "manifest": manifest,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True).encode()
    store = ckpt.params
    blocks = [
        np.concatenate([p.data.ravel() for _, p in store]),
        np.concatenate([store.m[n].ravel() for n, _ in store]),
        np.concatenate([store.v[n].ravel() for n, _ in store]),
    ]
    body = b"".join(b.astype("<f4").tobytes() for b in blocks)
    return MAGIC + struct.pack("<Q", len(header)) + header + body


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def from_bytes(blob: bytes, expect_model: ModelConfig | None = None) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        if blob[:7] == MAGIC[:7]:
            raise VersionMismatch(f"unsupported checkpoint magic {blob[:8]!r}")
        raise CorruptCheckpoint("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    if header.get("version") != VERSION:
        raise VersionMismatch(f"checkpoint version {header.get('version')} != {VERSION}")
    try:
        sim = SimConfig.model_validate(header["sim"])
        model = ModelConfig.model_validate(header["model"])
        train = TrainConfig.model_validate(header["train"])
    except Exception as exc:
        raise CorruptCheckpoint(f"invalid configs in header: {exc}") from None
    n = header["n_params"]
    if n != expected_param_count(model):
        raise ConfigMismatch(f"checkpoint holds {n} parameters but its model config implies {expected_param_count(model)}")
    if header["config_hash"] != config_hash(model):
        raise ConfigMismatch("model config hash does not match header")
    if expect_model is not None and expect_model != model:
        raise ConfigMismatch(f"checkpoint model config {model} differs from requested {expect_model}")
    body = blob[16 + hlen :]
    if len(body) != 3 * 4 * n:
        raise CorruptCheckpoint(f"expected {3 * 4 * n} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(3, n)
    store = nn.ParamStore()
    for entry in header["manifest"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape))
        store.add(name, data[0, off : off + size].reshape(shape).copy())
        store.m[name] = data[1, off : off + size].reshape(shape).copy()
        store.v[name] = data[2, off : off + size].reshape(shape).copy()
    store.step = header["adam_step"]
    return Checkpoint(sim, model, train, header["step"], store, header.get("phase", "init"))


def load_checkpoint(path: str | Path, expect_model: ModelConfig | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expect_model)


def file_digest(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
