"""Named, order-independent random streams."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(master: int, seed_index: int, label: str) -> np.random.Generator:
    """Return a generator keyed by ``(master, seed_index, label)``.

    Two calls with the same key produce identical streams; distinct labels are
    statistically independent, so consumers never depend on execution order.
    """
    ss = np.random.SeedSequence([int(master), int(seed_index), _label_key(label)])
    return np.random.Generator(np.random.PCG64(ss))
