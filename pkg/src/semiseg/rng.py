"""Seed management.

All randomness in a run flows from one root seed, split into named
substreams ("init", "schedule", "aug.weak", "aug.strong", "featperturb", ...)
so that individual components can be reproduced in isolation and so that
disabling one component never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named substream of ``root_seed``."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


class RngBundle:
    """Factory for per-component generators derived from one root seed.

    Generators are created lazily and cached, so repeated lookups return the
    same (stateful) generator object.
    """

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._numpy: dict[str, np.random.Generator] = {}
        self._torch: dict[str, torch.Generator] = {}

    def numpy(self, name: str) -> np.random.Generator:
        if name not in self._numpy:
            self._numpy[name] = np.random.default_rng(substream_seed(self.root_seed, name))
        return self._numpy[name]

    def torch_gen(self, name: str) -> torch.Generator:
        if name not in self._torch:
            g = torch.Generator()
            g.manual_seed(substream_seed(self.root_seed, name))
            self._torch[name] = g
        return self._torch[name]
