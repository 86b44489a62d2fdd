"""
Seeded random streams and configuration digests.
"""
import hashlib
import json
import zlib
from typing import Any

import numpy as np


def make_rng(seed: int, *stream: Any) -> np.random.Generator:
    """Independent generator for ``seed`` and a named stream.

    Stream labels are hashed with crc32 so results do not depend on Python's
    per-process string hashing.
    """
    keys = [zlib.crc32(str(label).encode("utf-8")) for label in stream]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]))


def config_digest(payload: Any) -> str:
    """Short sha256 digest of a JSON-serializable configuration."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
