"""Binary parameter persistence.

Layout (all integers little-endian):

    magic   4 bytes  "PNET"
    version u32      currently 1
    m'      u32      patch height
    n'      u32      patch width
    c       u32      patch channels
    entries u32      manifest length
    manifest, per entry:
        name_len u16, name utf-8, ndim u8, dims u32 * ndim
    payload          all tensors as float32, raveled row-major, manifest order
    checksum u64     BLAKE2b-64 of the payload bytes

Bad magic, unsupported version, and checksum mismatch raise distinct errors;
a truncated payload surfaces as a checksum error rather than a crash.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .nn import ConvLayer, HeadLayer, ReducerBank, SubnetParams, check_params, param_arrays

MAGIC = b"PNET"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _manifest_names() -> list[str]:
    names = []
    for i in range(7):
        names += [f"conv{i}.weights", f"conv{i}.bias"]
    names += ["reducer.weights", "reducer.bias", "head.weights", "head.bias"]
    return names


def _payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(params: SubnetParams, path: str) -> None:
    check_params(params)
    m, n, c = params.patch_dims
    arrays = param_arrays(params)
    head = [MAGIC, struct.pack("<IIIII", VERSION, m, n, c, len(arrays))]
    for name, arr in zip(_manifest_names(), arrays):
        nb = name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)))
        head.append(nb)
        head.append(struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = b"".join(np.ascontiguousarray(a, np.dtype("<f4")).tobytes() for a in arrays)
    with open(path, "wb") as f:
        f.write(b"".join(head))
        f.write(payload)
        f.write(struct.pack("<Q", _payload_checksum(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ChecksumError("checkpoint truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> SubnetParams:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a PNET checkpoint")
    version, m, n, c, n_entries = r.unpack("<IIIII")
    if version != VERSION:
        raise VersionError(f"{path}: version {version} unsupported (supported: {VERSION})")
    shapes = []
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        shapes.append((name, dims))
    if [s[0] for s in shapes] != _manifest_names():
        raise CheckpointError(f"{path}: unexpected manifest entries")
    payload_len = sum(int(np.prod(d)) for _, d in shapes) * 4
    payload = r.take(payload_len)
    (stored,) = r.unpack("<Q")
    if stored != _payload_checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")

    arrays = []
    off = 0
    for _, dims in shapes:
        count = int(np.prod(dims))
        arr = np.frombuffer(payload, np.dtype("<f4"), count, off).reshape(dims).copy()
        arrays.append(arr)
        off += count * 4
    convs = [ConvLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(7)]
    reducer = ReducerBank(arrays[14], arrays[15])
    head_w, head_b = arrays[16], arrays[17].reshape(())
    params = SubnetParams(convs, reducer, HeadLayer(head_w, head_b), (m, n, c))
    check_params(params)
    return params
