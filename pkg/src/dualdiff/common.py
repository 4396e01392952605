"""Seed derivation, canonical hashing, and atomic file output.

All randomness in the package flows from integer seeds through Philox
(counter-based, platform-independent) generators; independent streams are
derived by hashing the base seed together with a stream label.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def derive_seed(base_seed: int, *stream: int | str) -> int:
    """Stable 64-bit seed for a named substream of ``base_seed``."""
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for part in stream:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(base_seed: int, *stream: int | str) -> np.random.Generator:
    """Philox generator keyed by (seed, stream labels)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(base_seed, *stream)))


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON; the hashing wire format for configs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | Path, obj, indent: int = 2) -> None:
    atomic_write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")
