"""Deterministic random number generation on counter-based Philox streams.

Every consumer of randomness gets its own named stream derived from the
run seed, so adding a draw in one place never shifts the values seen by
another. Identical seed + identical call sequence reproduce sample
sequences bit for bit, and stream state round-trips through checkpoints.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Uniform samples are clamped away from {0, 1} so -log(-log(u)) stays finite.
UNIFORM_CLAMP = 1e-12


def _stream_key(tag: str) -> int:
    # Python's hash() is salted per process; use a stable digest instead.
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


class Rng:
    """Seeded factory of independent, replayable Philox streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, tag: str) -> np.random.Generator:
        """A fresh generator for `tag`; same (seed, tag) always restarts it."""
        key = np.array([self.seed, _stream_key(tag)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def stream_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Philox stream."""
    st = gen.bit_generator.state
    return {
        "counter": [int(v) for v in st["state"]["counter"]],
        "key": [int(v) for v in st["state"]["key"]],
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore_stream(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(state["counter"], dtype=np.uint64),
            "key": np.array(state["key"], dtype=np.uint64),
        },
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)


def gumbel_noise(gen: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Standard Gumbel samples -log(-log(u)), u uniform on the open unit interval."""
    u = gen.random(shape)
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return (-np.log(-np.log(u))).astype(dtype, copy=False)
