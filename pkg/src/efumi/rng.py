"""Deterministic pseudo-randomness shared by every stochastic component.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's Philox counter-based bit generator.  Philox is specified
as a fixed algorithm (Salmon et al., counter-based, 4x64 words), so equal
seeds produce identical streams on every platform and numpy build.

Child streams are derived from ``(seed, tag)`` pairs via
``numpy.random.SeedSequence``, which is likewise algorithmically pinned.
Tags may be strings; they are hashed to 64-bit integers with SHA-256 so a
tag never depends on Python's per-process hash randomization.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded, reproducible random stream (Philox counter-based generator).

    Parameters
    ----------
    seed : int
        64-bit seed. Equal seeds give bit-identical streams.
    _path : tuple of int, internal
        Derivation path for child streams; do not pass directly.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence((self.seed,) + _path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, tag: int | str) -> "Rng":
        """Derive an independent stream identified by ``tag``.

        Children with distinct tags are statistically independent; the
        same ``(seed, tag)`` always yields the same stream.
        """
        return Rng(self.seed, self._path + (_tag_to_int(tag),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
