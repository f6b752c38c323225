"""Binary checkpoint container with integrity checking.

Layout (little-endian):

    magic 8 bytes | version u32 | config digest 32 bytes |
    meta_len u64 | meta json (step, rng state, tensor table) |
    tensor data blob | sha256 of everything above

The tensor table stores (name, dtype, shape, offset, nbytes) with offsets
into the data blob. Loading verifies magic, version, config digest, and
the trailing checksum before touching any tensor, and each failure mode
raises its own exception type.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"DFNCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class FormatError(CheckpointError):
    """Not a checkpoint file (bad magic)."""


class VersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class DigestError(CheckpointError):
    """Checkpoint belongs to a different configuration."""


class TruncatedError(CheckpointError):
    """File ends before the declared content."""


class IntegrityError(CheckpointError):
    """Content checksum mismatch (corruption)."""


_DTYPES = {"float64": np.float64, "float32": np.float32}


def save_checkpoint(
    path: str,
    config_digest: str,
    tensors: dict[str, np.ndarray],
    step: int,
    rng_state: dict,
    extra: dict | None = None,
) -> None:
    table = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    meta = {
        "step": int(step),
        "rng": rng_state,
        "tensors": table,
        "extra": extra or {},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()

    head = bytearray()
    head += MAGIC
    head += struct.pack("<I", VERSION)
    head += bytes.fromhex(config_digest)
    head += struct.pack("<Q", len(meta_raw))
    head += meta_raw
    body = b"".join(blobs)
    payload = bytes(head) + body
    checksum = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(checksum)


def load_checkpoint(path: str, config_digest: str):
    """Returns (tensors, step, rng_state, extra) after full verification."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 32 + 8 + 32:
        raise TruncatedError(f"{path}: file too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    payload, checksum = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise IntegrityError(f"{path}: checksum mismatch")

    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    if version != VERSION:
        raise VersionError(f"{path}: version {version}, expected {VERSION}")
    digest = payload[pos : pos + 32].hex()
    pos += 32
    if digest != config_digest:
        raise DigestError(
            f"{path}: checkpoint digest {digest[:12]}... does not match "
            f"config digest {config_digest[:12]}..."
        )
    (meta_len,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    if pos + meta_len > len(payload):
        raise TruncatedError(f"{path}: metadata extends past end of file")
    meta = json.loads(payload[pos : pos + meta_len].decode())
    pos += meta_len

    tensors = {}
    for entry in meta["tensors"]:
        start = pos + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(payload):
            raise TruncatedError(f"{path}: tensor {entry['name']} extends past end")
        arr = np.frombuffer(payload[start:end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, meta["step"], meta["rng"], meta["extra"]
