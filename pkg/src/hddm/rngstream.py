"""Named, reproducible random streams.

All randomness in the package flows from one global seed through
``stream(seed, *names)``. The names (strings or ints) are hashed with
SHA-256 into SeedSequence entropy, so:

* every component gets an independent stream identified by what it is,
  not by call order;
* adding parallelism never perturbs results (a worker derives the same
  stream from the same name on any thread or process);
* streams are stable across platforms and numpy versions that share the
  PCG64 bit generator.

Convention used throughout: ``stream(seed, "component", detail, ...)``,
e.g. ``stream(7, "expert", 3, "init", "blocks.0.msa.w1")``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _hash_words(name) -> list[int]:
    """Map one name component to four uint32 entropy words."""
    if isinstance(name, (int, np.integer)):
        data = b"i" + int(name).to_bytes(16, "little", signed=True)
    elif isinstance(name, str):
        data = b"s" + name.encode("utf-8")
    else:
        raise TypeError(f"stream names must be str or int, got {type(name)!r}")
    digest = hashlib.sha256(data).digest()
    return [int.from_bytes(digest[4 * i : 4 * i + 4], "little") for i in range(4)]


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        entropy.extend(_hash_words(name))
    return np.random.SeedSequence(entropy)


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the (seed, names...) coordinate."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def derive_seed(seed: int, *names) -> int:
    """Collapse a named coordinate into a plain integer seed.

    Used where a component (an expert trainer, a study repetition) owns a
    whole subtree of named streams of its own.
    """
    return int(seed_sequence(seed, *names).generate_state(1, np.uint64)[0])
