"""Writer/reader for the .nbla activation dump wire format.

Independent implementation of the cross-component contract: a 24-byte
little-endian header (magic "NBLA", version, layer, role, feature dim,
token count, dtype, padding) followed by float32 payload stored one token
vector after another. Files here are written append-style: a placeholder
header goes in first, payload blocks stream in per batch, and the header
is finalized with the real token count at the end.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"NBLA"
VERSION = 1
ROLE_INPUT = 0
ROLE_OUTPUT = 1
DTYPE_FLOAT32 = 0

HEADER_STRUCT = struct.Struct("<4sHHBIQBxx")
HEADER_SIZE = HEADER_STRUCT.size


def dump_filename(layer_index: int, role: int) -> str:
    suffix = "input" if role == ROLE_INPUT else "output"
    return f"layer{layer_index:03}_{suffix}.nbla"


class StreamingDumpWriter:
    """Appends float32 token blocks; the header is finalized on close."""

    def __init__(self, path: str, layer_index: int, role: int, feature_dim: int):
        self.path = path
        self.layer_index = layer_index
        self.role = role
        self.feature_dim = feature_dim
        self.token_count = 0
        self._fh = open(path, "wb")
        self._fh.write(b"\x00" * HEADER_SIZE)

    def append(self, tokens_by_feature: np.ndarray) -> None:
        """Write a (N_chunk, feature_dim) float block, one row per token."""
        arr = np.ascontiguousarray(tokens_by_feature, dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != self.feature_dim:
            raise ValueError(
                f"chunk shape {arr.shape} does not match feature dim {self.feature_dim}"
            )
        self._fh.write(arr.tobytes())
        self.token_count += arr.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(
            HEADER_STRUCT.pack(
                MAGIC, VERSION, self.layer_index, self.role,
                self.feature_dim, self.token_count, DTYPE_FLOAT32,
            )
        )
        self._fh.close()


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise ValueError("truncated header")
    magic, version, layer_index, role, h, n, dtype_code = HEADER_STRUCT.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise ValueError(f"unsupported dtype code {dtype_code}")
    if role not in (ROLE_INPUT, ROLE_OUTPUT):
        raise ValueError(f"bad role byte {role}")
    if h < 1 or n < 1:
        raise ValueError("feature dim and token count must be >= 1")
    return {
        "layer_index": layer_index,
        "role": role,
        "feature_dim": h,
        "token_count": n,
        "payload_bytes": 4 * h * n,
    }


def check_payload(path: str, header: dict, chunk_tokens: int = 65536) -> None:
    """Validate payload length and finiteness without loading whole files."""
    expected = HEADER_SIZE + header["payload_bytes"]
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValueError(f"file size {actual} != expected {expected}")
    h = header["feature_dim"]
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        remaining = header["token_count"]
        while remaining > 0:
            take = min(remaining, chunk_tokens)
            block = np.frombuffer(fh.read(4 * h * take), dtype="<f4")
            if not np.isfinite(block).all():
                raise ValueError("payload contains non-finite values")
            remaining -= take
