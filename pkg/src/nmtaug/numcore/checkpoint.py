"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    b"CMDA"  u16 version  u8 role  u8 side  u8 mode  u8 value-bytes
    u32 vocab size
    u16 digest length, digest (ASCII)
    u32 metadata length, metadata (UTF-8 ``key=value`` lines)
    u32 record count
    per record: u32 name length, name (UTF-8), u8 rank, u32 dims..., raw values
    u32 CRC-32 of every preceding byte

Writes go to a temporary file that is renamed into place, and reads parse and
validate the whole file before returning, so a corrupted or truncated file
raises ``CheckpointError`` without leaving partial state anywhere.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError

MAGIC = b"CMDA"
VERSION = 1

ROLES = {"nmt": 0, "cmlm": 1, "trainer": 2}
SIDES = {None: 0, "source": 1, "target": 2}
MODES = {None: 0, "both": 1, "mono": 2}
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    role: str
    vocab_size: int
    digest: str
    params: dict[str, np.ndarray]
    side: str | None = None
    mode: str | None = None
    metadata: dict[str, str] = field(default_factory=dict)


def _encode(ckpt: Checkpoint) -> bytes:
    if ckpt.role not in ROLES:
        raise ValueError(f"unknown checkpoint role {ckpt.role!r}")
    widths = {a.dtype.itemsize for a in ckpt.params.values()}
    if len(widths) > 1 or not widths <= set(_DTYPES):
        raise ValueError("all checkpoint arrays must share one float precision")
    width = widths.pop() if widths else 8
    dtype = _DTYPES[width]

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBBBB", VERSION, ROLES[ckpt.role], SIDES[ckpt.side], MODES[ckpt.mode], width))
    buf.write(struct.pack("<I", ckpt.vocab_size))
    digest = ckpt.digest.encode("ascii")
    buf.write(struct.pack("<H", len(digest)) + digest)
    for key, value in ckpt.metadata.items():
        if "\n" in key or "=" in key or "\n" in str(value):
            raise ValueError(f"metadata entry {key!r} cannot be encoded")
    meta = "".join(f"{k}={v}\n" for k, v in ckpt.metadata.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, array in ckpt.params.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)) + raw_name)
        buf.write(struct.pack("<B", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    blob = _encode(ckpt)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint checksum mismatch (corrupted file)")
    r = _Reader(body)
    r.take(4)
    version, role, side, mode, width = r.unpack("<HBBBB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if width not in _DTYPES:
        raise CheckpointError(f"unsupported value width {width}")
    try:
        role_name = {v: k for k, v in ROLES.items()}[role]
        side_name = {v: k for k, v in SIDES.items()}[side]
        mode_name = {v: k for k, v in MODES.items()}[mode]
    except KeyError:
        raise CheckpointError("invalid checkpoint header flags") from None
    (vocab_size,) = r.unpack("<I")
    (n,) = r.unpack("<H")
    digest = r.take(n).decode("ascii")
    (n,) = r.unpack("<I")
    metadata = {}
    for line in r.take(n).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        metadata[key] = value
    (count,) = r.unpack("<I")
    dtype = _DTYPES[width]
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(size * width), dtype=dtype).reshape(shape)
        params[name] = values.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(
        role=role_name,
        vocab_size=vocab_size,
        digest=digest,
        params=params,
        side=side_name,
        mode=mode_name,
        metadata=metadata,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(blob)
