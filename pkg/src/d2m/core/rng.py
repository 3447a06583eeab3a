"""Deterministic random streams.

Every random draw in the package goes through :func:`fork_rng`, which maps a
``(seed, label)`` pair to an independent numpy ``Generator``. Torch
operations that need randomness get a ``torch.Generator`` seeded from one of
these streams via :func:`torch_generator`.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def _label_words(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def fork_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Return the random stream identified by ``(seed, stream_label)``.

    Identical pairs give identical streams; distinct labels give streams
    spawned from distinct keys of the same seed sequence, so they are
    statistically independent.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_label_words(stream_label))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng`` (for torch or nested streams)."""
    return int(rng.integers(0, 2**63 - 1))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(rng))
    return g
