"""
Seeding Module

Derives independent random streams from (seed, problem id, purpose, step,
index) so that results never depend on the order in which work is done.
"""

import zlib

import numpy as np

# Purpose tags keep streams for different jobs apart.
PURPOSES = {
    "rollout": 1,
    "guided": 2,
    "expert": 3,
    "estimate": 4,
    "eval": 5,
    "ppl": 6,
    "shuffle": 7,
    "init": 8,
}


def problem_key(problem_id):
    """Stable 32-bit key of a problem id."""
    return zlib.crc32(problem_id.encode("utf-8"))


def stream(seed, purpose, problem_id="", step=0, index=0):
    """Return a Generator keyed by its arguments."""
    entropy = [
        int(seed) & 0xFFFFFFFFFFFFFFFF,
        PURPOSES[purpose],
        problem_key(problem_id),
        int(step),
        int(index),
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def streams(seed, purpose, problem_id, step, count, start=0):
    """Return `count` consecutive streams starting at index `start`."""
    return [
        stream(seed, purpose, problem_id, step, start + i) for i in range(count)
    ]
