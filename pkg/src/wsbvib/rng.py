"""Deterministic random stream derivation.

Every stochastic site derives its own generator from (root seed, purpose
string, integer indices) instead of consuming a shared stateful generator.
That makes replays independent of evaluation order, so resumed training and
repeated runs reproduce results bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def stream_words(seed: int, purpose: str, *indices: int) -> list[int]:
    tag = purpose + "".join(f"|{i}" for i in indices)
    digest = hashlib.sha256(f"{seed}|{tag}".encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def np_rng(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(stream_words(seed, purpose, *indices)))


def torch_gen(seed: int, purpose: str, *indices: int) -> torch.Generator:
    words = stream_words(seed, purpose, *indices)
    g = torch.Generator()
    g.manual_seed(words[0] | (words[1] << 32))
    return g
