"""Checkpoint container and encoder transfer.

File layout (all integers little-endian):

    magic   8 bytes  b"SLUKCKPT"
    version u32      currently 1
    nmeta   u32      metadata entry count
    meta    nmeta times: u32 key len, key bytes, u32 value len, value bytes (UTF-8)
    ntens   u32      tensor record count
    tensor  ntens times:
        u16 name len, name bytes (UTF-8, dotted path)
        u8  dtype tag   0 = f32, 1 = f64
        u8  flags       bit 0: trainable
        u8  rank
        u32 x rank      dims
        u64 payload len
        payload         row-major little-endian
        u32 CRC32 of the payload

Round trips are byte-identical: tensors are written in insertion order and
every field is fixed-width or length-prefixed.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, TransferError

MAGIC = b"SLUKCKPT"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    version: int = VERSION
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, Tensor] = field(default_factory=dict)


def _pack_str(s: str, lenfmt: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(lenfmt, len(raw)) + raw


def save_checkpoint(path, tensors: dict[str, Tensor], metadata: dict[str, str] | None = None):
    metadata = metadata or {}
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(metadata))]
    for key, value in metadata.items():
        parts.append(_pack_str(str(key), "<I"))
        parts.append(_pack_str(str(value), "<I"))
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack("<BBB", tag, 1 if t.trainable else 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def string(self, lenfmt: str) -> str:
        return self.take(self.unpack(lenfmt)).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    metadata = {}
    for _ in range(r.unpack("<I")):
        key = r.string("<I")
        metadata[key] = r.string("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(r.unpack("<I")):
        name = r.string("<H")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name '{name}'")
        tag, flags, rank = r.unpack("<BBB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        if rank == 1:
            dims = (dims,)
        elif rank == 0:
            dims = ()
        dtype = _TAG_DTYPES[tag]
        plen = r.unpack("<Q")
        expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if plen != expect:
            raise CheckpointError(
                f"{path}: tensor '{name}' payload length {plen} does not match "
                f"shape {tuple(dims)} ({expect} bytes)"
            )
        payload = r.take(plen)
        crc = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: tensor '{name}' failed its CRC32 check")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        t = Tensor(np.ascontiguousarray(arr))
        t.trainable = bool(flags & 1)
        tensors[name] = t
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(version=version, metadata=metadata, tensors=tensors)


def save_model(path, model, metadata: dict[str, str] | None = None):
    save_checkpoint(path, model.named_parameters(), metadata)


def fingerprint_tensors(tensors: dict[str, Tensor], prefix: str = "") -> str:
    """SHA-256 over the names, dtypes, shapes, and exact bytes of every
    tensor whose name starts with prefix, visited in sorted name order.
    The prefix is stripped before hashing so a parameter set keeps its
    fingerprint when mounted under a submodule name. Equal digests mean
    bit-identical values."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if not name.startswith(prefix):
            continue
        arr = tensors[name].data
        h.update(name[len(prefix):].encode("utf-8"))
        h.update(arr.dtype.str.encode("ascii"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_into_model(ckpt: Checkpoint, model, strict: bool = True):
    """Overwrite model parameters from the checkpoint, name by name.

    Dtypes must match exactly; loading f64 tensors into an f32 model is an
    error rather than a silent cast.
    """
    params = model.named_parameters()
    if strict:
        missing = sorted(set(params) - set(ckpt.tensors))
        unknown = sorted(set(ckpt.tensors) - set(params))
        if missing or unknown:
            raise CheckpointError(
                f"parameter name mismatch: missing from file {missing}, "
                f"unknown tensor name {unknown}"
            )
    for name, p in params.items():
        if name not in ckpt.tensors:
            continue
        src = ckpt.tensors[name]
        if src.data.shape != p.data.shape:
            raise CheckpointError(
                f"tensor '{name}': shape {src.data.shape} in file, model wants {p.data.shape}"
            )
        if src.data.dtype != p.data.dtype:
            raise CheckpointError(
                f"tensor '{name}': dtype {src.data.dtype.name} in file, model is "
                f"{p.data.dtype.name}; refusing to cast"
            )
        p.data[...] = src.data
        p.trainable = src.trainable


class TransferPolicy:
    FIX = "fix"
    FINETUNE = "finetune"

    @staticmethod
    def parse(name: str) -> str:
        low = name.strip().lower().replace("-", "").replace("_", "")
        if low == "fix":
            return TransferPolicy.FIX
        if low in ("finetune", "tune"):
            return TransferPolicy.FINETUNE
        raise TransferError(f"unknown transfer policy '{name}' (expected fix or finetune)")


ENCODER_PREFIX = "encoder."


def transfer_encoder(ckpt: Checkpoint, target_model, policy: str):
    """Copy every encoder.* tensor from the checkpoint into the target,
    which keeps its fresh initialization everywhere else. The encoder's
    input projection counts as part of the encoder and moves with it.

    Fix freezes the copied tensors (trainable off, excluded from the tape);
    FineTune leaves them trainable.
    """
    if policy not in (TransferPolicy.FIX, TransferPolicy.FINETUNE):
        raise TransferError(f"unknown transfer policy '{policy}'")
    params = target_model.named_parameters()
    enc_names = [n for n in params if n.startswith(ENCODER_PREFIX)]
    if not enc_names:
        raise TransferError("target model exposes no encoder.* parameters")
    available = {n for n in ckpt.tensors if n.startswith(ENCODER_PREFIX)}
    missing = sorted(set(enc_names) - available)
    if missing:
        raise TransferError(f"checkpoint lacks encoder tensors: {missing}")
    mismatched = [
        f"{n}: file {ckpt.tensors[n].data.shape} vs model {params[n].data.shape}"
        for n in enc_names
        if ckpt.tensors[n].data.shape != params[n].data.shape
    ]
    if mismatched:
        raise TransferError("encoder shape mismatch: " + "; ".join(mismatched))
    for n in enc_names:
        src = ckpt.tensors[n]
        dst = params[n]
        if src.data.dtype != dst.data.dtype:
            raise TransferError(
                f"tensor '{n}': dtype {src.data.dtype.name} in file, model is "
                f"{dst.data.dtype.name}; refusing to cast"
            )
        dst.data[...] = src.data
        if policy == TransferPolicy.FIX:
            dst.trainable = False
            dst.requires_grad = False
