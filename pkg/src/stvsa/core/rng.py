"""Deterministic random streams.

Every random draw in the package comes from an :class:`RngStream`. A stream is
an immutable ``(master_seed, stream_id)`` pair; each call to
:meth:`RngStream.generator` returns a *fresh* numpy ``Generator`` (PCG64 seeded
through ``SeedSequence(master_seed, spawn_key=(stream_id,))``), so handing the
same stream to a function twice reproduces the same draws.
"""
from __future__ import annotations

import contextlib
import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

_U64 = (1 << 64) - 1


def _check_u64(value: int, name: str) -> int:
    value = int(value)
    if not 0 <= value <= _U64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")
    return value


def stream_id_for(*parts: object) -> int:
    """Stable 64-bit id from a tuple of labels (strings and ints)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        token = repr(part).encode()
        h.update(struct.pack("<I", len(token)))
        h.update(token)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_id: int

    def __post_init__(self):
        _check_u64(self.master_seed, "master_seed")
        _check_u64(self.stream_id, "stream_id")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *parts: object) -> "RngStream":
        """Sub-stream keyed by ``parts``; independent of the parent's draws."""
        return RngStream(self.master_seed, stream_id_for(self.stream_id, *parts))

    def torch_seed(self) -> int:
        return int(self.generator().integers(0, 2**63 - 1))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.torch_seed())
        return g


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    return RngStream(int(master_seed), int(stream_id))


@contextlib.contextmanager
def torch_seeded(stream: RngStream) -> Iterator[None]:
    """Seed torch's global RNG for the block (module init), restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream.torch_seed())
        yield
