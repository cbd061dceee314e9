"""
Splittable counter-based random streams.

Every source of randomness descends from one integer root seed. A stream is
identified by (root_seed, label path); its Philox key is the first 128 bits
of SHA-256 over that identity, so streams with different labels never share
state and the same label always reproduces the same numbers.

Labels in use: ``init``, ``head``, ``shuffle/<epoch>``, ``dropout``,
``mask``, ``sampling``, ``corpus``, ``task``, ``grammar``.
"""

import hashlib
from typing import Tuple

import numpy as np


class RngStream:
    """Named random stream backed by numpy's Philox bit generator."""

    def __init__(self, root_seed: int, path: Tuple[str, ...] = ()):
        self.root_seed = int(root_seed)
        self.path = tuple(str(p) for p in path)
        key = self._derive_key(self.root_seed, self.path)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @staticmethod
    def _derive_key(root_seed: int, path: Tuple[str, ...]) -> int:
        h = hashlib.sha256()
        h.update(root_seed.to_bytes(8, "little", signed=True))
        for label in path:
            h.update(b"/")
            h.update(label.encode("utf-8"))
        return int.from_bytes(h.digest()[:16], "little")

    def split(self, *labels: object) -> "RngStream":
        """Derive an independent child stream."""
        return RngStream(self.root_seed, self.path + tuple(str(l) for l in labels))

    @property
    def label(self) -> str:
        return "/".join(self.path) or "<root>"

    def __repr__(self) -> str:
        return f"RngStream(seed={self.root_seed}, path={self.label!r})"
