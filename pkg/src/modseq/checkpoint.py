"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"MSEQ"                         magic
    u32 version                     currently 1
    u32 n, n bytes                  UTF-8 JSON header: variant, model config, run config text
    u32 count                       number of tensors
    count x entry:
        u16 n, n bytes              parameter name
        u16 n, n bytes              group label
        i32 lang                    language index, -1 for shared parameters
        u8 ndim, ndim x u64 shape
        prod(shape) x f64           values, C order
    32 bytes                        SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, Seq2SeqModel

MAGIC = b"MSEQ"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CompatibilityError(CheckpointError):
    pass


@dataclass
class Entry:
    name: str
    group: str
    lang: int
    values: np.ndarray


@dataclass
class Checkpoint:
    variant: str
    model_config: ModelConfig
    run_config: str
    entries: list[Entry]

    def state(self) -> dict[str, np.ndarray]:
        return {e.name: e.values for e in self.entries}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def to_bytes(model: Seq2SeqModel, run_config: str = "") -> bytes:
    header = json.dumps(
        {"variant": model.variant, "model": model.config.to_dict(), "run_config": run_config},
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(model.params))]
    for p in model.params.values():
        arr = np.ascontiguousarray(p.tensor.data, dtype="<f8")
        parts += [_pack_str(p.name), _pack_str(p.group), struct.pack("<i", p.lang),
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(path: str | Path, model: Seq2SeqModel, run_config: str = "") -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(model, run_config))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 32 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; the file is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        name, group = r.string(), r.string()
        (lang,) = r.unpack("<i")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        entries.append(Entry(name, group, lang, values))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    return Checkpoint(header["variant"], ModelConfig(**header["model"]), header["run_config"], entries)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        return from_bytes(buf)
    except CheckpointError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def restore(ckpt: Checkpoint, variant: str | None = None, config: ModelConfig | None = None) -> Seq2SeqModel:
    """Rebuild the model; refuses a different variant or model shape than requested."""
    if variant is not None and variant != ckpt.variant:
        raise CompatibilityError(f"checkpoint holds a {ckpt.variant} model, but {variant} was requested")
    if config is not None and config != ckpt.model_config:
        diff = {k: (v, getattr(ckpt.model_config, k)) for k, v in config.to_dict().items()
                if getattr(ckpt.model_config, k) != v}
        raise CompatibilityError(f"checkpoint model config differs (requested, stored): {diff}")
    model = Seq2SeqModel(ckpt.model_config, ckpt.variant)
    if set(model.params) != {e.name for e in ckpt.entries}:
        raise CompatibilityError("checkpoint parameter names do not match the model layout")
    for e in ckpt.entries:
        p = model.params[e.name]
        if (p.group, p.lang) != (e.group, e.lang):
            raise CompatibilityError(f"{e.name}: stored label {(e.group, e.lang)} != {(p.group, p.lang)}")
        if p.tensor.shape != e.values.shape:
            raise CompatibilityError(f"{e.name}: stored shape {e.values.shape} != {p.tensor.shape}")
    model.load_state_dict(ckpt.state())
    return model
