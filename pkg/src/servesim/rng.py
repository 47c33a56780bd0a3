"""Deterministic random streams derived from a single top-level seed.

Every stochastic component draws from its own PCG64 stream, keyed by
``SeedSequence([seed, tag, *subkeys])``.  PCG64 stream stability is
guaranteed by numpy's random-generator compatibility policy, so the same
seed reproduces the same draws across runs and platforms.  Stream tags are
append-only: never renumber or reuse one.
"""

import numpy as np

TRACE_ARRIVALS = 1
TRACE_LENGTHS = 2
EXECUTOR_NOISE = 3
FALLBACK_INIT = 4
PROFILING_NOISE = 5
SPLIT_SHUFFLE = 6


def stream(seed: int, tag: int, *subkeys: int) -> np.random.Generator:
    """Return the PCG64 generator for (seed, tag) plus optional sub-keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag, *subkeys])))
