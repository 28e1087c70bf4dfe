"""Seed-stream derivation and shared error types."""
from __future__ import annotations

import hashlib

import numpy as np


class ConfigError(Exception):
    """Raised for unknown keys, bad types, or out-of-range config values."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter becomes non-finite during training."""


class SearchRoundFailed(RuntimeError):
    """Raised when every candidate in a search round fails."""


def _tag_int(tag) -> int:
    # stable 64-bit hash of the tag text; keeps named substreams independent
    h = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def child_seed(root_seed: int, *tags) -> int:
    """Derive a deterministic integer seed for a named substream."""
    h = hashlib.sha256()
    # mask so chained child seeds (full u64) stay encodable
    h.update((int(root_seed) & (2**64 - 1)).to_bytes(8, "little"))
    for tag in tags:
        h.update(str(tag).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def substream(root_seed: int, *tags) -> np.random.Generator:
    """Independent generator for the (root, tags...) stream."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & (2**63 - 1),
                                                         *(_tag_int(t) for t in tags)]))
