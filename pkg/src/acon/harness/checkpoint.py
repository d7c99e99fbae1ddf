"""Binary checkpoints: a named tensor table with a version and a CRC32 trailer.

Layout (all integers little-endian)::

    b"ACON"  u32 version  u32 entry_count
    entry_count x { u32 name_len, name (utf-8), u8 dtype_tag, u32 rank,
                    rank x u32 extent, payload (little-endian scalars) }
    u32 crc32 of every preceding byte

The network architecture travels as a ``uint8`` tensor named ``__arch__``
holding its JSON configuration, so a file is self-describing.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .network import Network

MAGIC = b"ACON"
FORMAT_VERSION = 1
ARCH_KEY = "__arch__"

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_OF = {dt.newbyteorder("="): tag for tag, dt in _TAGS.items()}


class CheckpointError(ValueError):
    """Raised for malformed, truncated, corrupted or incompatible checkpoints."""


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, t in tensors.items():
        t = np.asarray(t)
        tag = _TAG_OF.get(t.dtype.newbyteorder("="))
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", tag, t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t, dtype=_TAGS[tag]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint is truncated")
    if buf[:4] != MAGIC:
        raise CheckpointError("not an ACON checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    r = _Reader(buf, len(buf) - 4)
    r.take(4)
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = data.astype(dt.newbyteorder("="))
    if r.pos != r.end:
        raise CheckpointError("trailing bytes after tensor table")
    return tensors


def save_checkpoint(net: Network) -> bytes:
    arch = json.dumps(net.config(), sort_keys=True).encode("utf-8")
    tensors = {ARCH_KEY: np.frombuffer(arch, dtype=np.uint8)}
    tensors.update(net.named_parameters())
    return pack_tensors(tensors)


def load_checkpoint(buf: bytes) -> Network:
    tensors = unpack_tensors(buf)
    if ARCH_KEY not in tensors:
        raise CheckpointError(f"checkpoint has no {ARCH_KEY} entry")
    try:
        cfg = json.loads(tensors.pop(ARCH_KEY).tobytes().decode("utf-8"))
        net = Network.from_config(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot rebuild network: {exc}") from None
    expected = net.named_parameters()
    if set(expected) != set(tensors):
        missing, extra = sorted(set(expected) - set(tensors)), sorted(set(tensors) - set(expected))
        raise CheckpointError(f"parameter table mismatch (missing {missing}, unexpected {extra})")
    for name, value in tensors.items():
        if value.shape != expected[name].shape or value.dtype != expected[name].dtype:
            raise CheckpointError(f"{name}: stored {value.dtype}{value.shape}, "
                                  f"network needs {expected[name].dtype}{expected[name].shape}")
        net.set_parameter(name, value)
    return net


def write_checkpoint(path: str, net: Network) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(net))


def read_checkpoint(path: str) -> Network:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
