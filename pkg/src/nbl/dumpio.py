"""Binary activation dump format (.nbla).

One file holds one activation matrix for one (layer, role) pair. The layout
is a fixed 24-byte little-endian header followed by the float32 payload in
column-major order, i.e. one token's feature vector after another. Files are
paired by name: ``layer{k:03}_input.nbla`` / ``layer{k:03}_output.nbla``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

MAGIC = b"NBLA"
VERSION = 1
ROLE_INPUT = 0
ROLE_OUTPUT = 1
DTYPE_FLOAT32 = 0

HEADER_STRUCT = struct.Struct("<4sHHBIQBxx")
HEADER_SIZE = HEADER_STRUCT.size  # 24

assert HEADER_SIZE == 24


class DumpFormatError(ValueError):
    """Malformed or inconsistent .nbla content."""


@dataclass(frozen=True)
class DumpHeader:
    layer_index: int
    role: int
    feature_dim: int
    token_count: int
    version: int = VERSION
    dtype_code: int = DTYPE_FLOAT32

    def payload_bytes(self) -> int:
        return 4 * self.feature_dim * self.token_count

    def validate(self) -> None:
        if self.version != VERSION:
            raise DumpFormatError(f"unsupported version {self.version}")
        if self.dtype_code != DTYPE_FLOAT32:
            raise DumpFormatError(f"unsupported dtype code {self.dtype_code}")
        if self.role not in (ROLE_INPUT, ROLE_OUTPUT):
            raise DumpFormatError(f"bad role byte {self.role}")
        if self.feature_dim < 1:
            raise DumpFormatError("feature_dim must be >= 1")
        if self.token_count < 1:
            raise DumpFormatError("token_count must be >= 1")
        if not 0 <= self.layer_index < 1 << 16:
            raise DumpFormatError(f"layer_index {self.layer_index} out of range")


def write_dump(header: DumpHeader, matrix: np.ndarray, sink: BinaryIO) -> int:
    """Write one dump; returns the number of bytes written (24 + 4*h*N).

    ``matrix`` is (feature_dim, token_count); the payload is stored token-
    contiguous, so round-trips are bit-exact.
    """
    header.validate()
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape != (header.feature_dim, header.token_count):
        raise DumpFormatError(
            f"matrix shape {matrix.shape} does not match header "
            f"({header.feature_dim}, {header.token_count})"
        )
    if not np.isfinite(matrix).all():
        raise DumpFormatError("matrix contains non-finite values")
    raw = HEADER_STRUCT.pack(
        MAGIC,
        header.version,
        header.layer_index,
        header.role,
        header.feature_dim,
        header.token_count,
        header.dtype_code,
    )
    sink.write(raw)
    # column-major h x N == C-contiguous N x h
    payload = np.ascontiguousarray(matrix.T, dtype="<f4")
    sink.write(payload.tobytes())
    return HEADER_SIZE + header.payload_bytes()


def read_dump(source: BinaryIO) -> tuple[DumpHeader, np.ndarray]:
    """Read and validate one dump; returns (header, (h, N) float32 matrix)."""
    raw = source.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise DumpFormatError("truncated header")
    magic, version, layer_index, role, h, n, dtype_code = HEADER_STRUCT.unpack(raw)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}")
    header = DumpHeader(
        layer_index=layer_index,
        role=role,
        feature_dim=h,
        token_count=n,
        version=version,
        dtype_code=dtype_code,
    )
    header.validate()
    payload = source.read(header.payload_bytes())
    if len(payload) != header.payload_bytes():
        raise DumpFormatError(
            f"truncated payload: {len(payload)} of {header.payload_bytes()} bytes"
        )
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, h).T
    if not np.isfinite(matrix).all():
        raise DumpFormatError("payload contains non-finite values")
    return header, matrix


def dump_filename(layer_index: int, role: int) -> str:
    suffix = "input" if role == ROLE_INPUT else "output"
    return f"layer{layer_index:03}_{suffix}.nbla"


def write_dump_file(path: str, header: DumpHeader, matrix: np.ndarray) -> int:
    with open(path, "wb") as fh:
        return write_dump(header, matrix, fh)


def read_dump_file(path: str) -> tuple[DumpHeader, np.ndarray]:
    with open(path, "rb") as fh:
        return read_dump(fh)


def scan_dump_dir(dump_dir: str) -> dict[int, dict[int, str]]:
    """Map layer_index -> {role -> path} for every .nbla file present."""
    found: dict[int, dict[int, str]] = {}
    for name in sorted(os.listdir(dump_dir)):
        if not name.endswith(".nbla"):
            continue
        path = os.path.join(dump_dir, name)
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise DumpFormatError(f"{name}: truncated header")
        magic, version, layer_index, role, _, _, _ = HEADER_STRUCT.unpack(raw)
        if magic != MAGIC:
            raise DumpFormatError(f"{name}: bad magic {magic!r}")
        found.setdefault(layer_index, {})[role] = path
    return found
