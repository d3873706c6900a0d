"""Binary persistence for training-dynamics metadata (EDITMETA files).

Layout, little-endian throughout:

    magic            8 bytes  b"EDITMETA"
    version          u16      currently 1
    entry_count      u16
    per entry:
        id_len       u16
        module_id    id_len UTF-8 bytes
        kind         u8       0 = row-summary vector, 1 = subspace basis
        d_out        u32
        rank         u32      vectors: adapter rank; subspaces: column count
        payload      d_out * (1 if vector else k) float32, C order
        payload_crc  u32      CRC32 of the payload bytes
    file_crc         u32      CRC32 of everything before it

Coefficients are stored at 32-bit precision (a 4096-row vector is exactly
16384 payload bytes); in-memory math stays 64-bit.
"""

from __future__ import annotations

import struct
import zlib
from os import PathLike

import numpy as np

from .capture import EvolutionVector, SubspaceBasis
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    DegenerateVectorError,
    DuplicateModuleIdError,
    EmptyInputError,
    IoFailureError,
    TruncatedFileError,
    VersionUnsupportedError,
)

MAGIC = b"EDITMETA"
VERSION = 1

KIND_VECTOR = 0
KIND_SUBSPACE = 1

# magic + version + entry_count at the front, file CRC at the back.
_MIN_FILE_BYTES = len(MAGIC) + 2 + 2 + 4


def _encode_entry(module_id: str, kind: int, d_out: int, rank: int, coeffs: np.ndarray) -> bytes:
    ident = module_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise EmptyInputError(f"module_id too long: {len(ident)} bytes")
    payload = np.ascontiguousarray(coeffs, dtype="<f4").tobytes()
    out = bytearray()
    out += struct.pack("<H", len(ident))
    out += ident
    out += struct.pack("<BII", kind, d_out, rank)
    out += payload
    out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def persist_metadata(
    vectors: list[EvolutionVector],
    bases: list[SubspaceBasis],
    path: str | PathLike,
) -> int:
    """Write vectors and bases to ``path``; returns total bytes written."""
    if not vectors:
        raise EmptyInputError("at least one vector is required")
    seen: set[str] = set()
    for name in [v.module_id for v in vectors] + [b.source_module for b in bases]:
        if name in seen:
            raise DuplicateModuleIdError(f"duplicate module_id {name!r}")
        seen.add(name)
    for v in vectors:
        if v.norm() == 0.0:
            raise DegenerateVectorError(f"all-zero summary for module {v.module_id!r}")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HH", VERSION, len(vectors) + len(bases))
    for v in vectors:
        blob += _encode_entry(v.module_id, KIND_VECTOR, v.d_out, v.rank, v.u)
    for b in bases:
        blob += _encode_entry(b.source_module, KIND_SUBSPACE, b.d_out, b.k, b.columns)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))

    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path!r}: {exc}") from exc
    return len(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_metadata(path: str | PathLike) -> tuple[list[EvolutionVector], list[SubspaceBasis]]:
    """Read an EDITMETA file back into vectors and bases.

    Values come back at the stored 32-bit precision; subspace orthonormality
    is re-checked at a tolerance loose enough for the float32 round trip.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path!r}: {exc}") from exc

    if len(data) < _MIN_FILE_BYTES:
        raise TruncatedFileError(f"file is {len(data)} bytes, minimum is {_MIN_FILE_BYTES}")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}")
    version = struct.unpack_from("<H", data, len(MAGIC))[0]
    if version != VERSION:
        raise VersionUnsupportedError(f"version {version} unsupported (expected {VERSION})")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumMismatchError("file checksum mismatch")

    rd = _Reader(data[: len(data) - 4])
    rd.pos = len(MAGIC) + 2
    entry_count = rd.u16()

    vectors: list[EvolutionVector] = []
    bases: list[SubspaceBasis] = []
    for _ in range(entry_count):
        ident = rd.take(rd.u16()).decode("utf-8")
        kind = rd.u8()
        d_out = rd.u32()
        rank = rd.u32()
        if kind == KIND_VECTOR:
            payload = rd.take(d_out * 4)
        elif kind == KIND_SUBSPACE:
            payload = rd.take(d_out * rank * 4)
        else:
            raise TruncatedFileError(f"unknown entry kind {kind}")
        if rd.u32() != zlib.crc32(payload):
            raise ChecksumMismatchError(f"payload checksum mismatch for {ident!r}")
        coeffs = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if kind == KIND_VECTOR:
            vectors.append(EvolutionVector(coeffs, ident, rank))
        else:
            bases.append(SubspaceBasis(coeffs.reshape(d_out, rank), ident, orthogonality_tol=1e-5))
    if rd.pos != len(rd.data):
        raise TruncatedFileError(f"{len(rd.data) - rd.pos} unexpected trailing bytes")
    return vectors, bases
