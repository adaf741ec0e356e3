"""Counter-based random streams.

Every draw is a pure function of ``(seed, purpose, block, substream, stream)``
pushed through the Philox4x64-10 bijection, vectorised over stream ids.
Particle ``j`` at step ``k`` therefore sees the same numbers whatever the
ensemble size, the schedule, or the number of workers.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10

# purpose tags (second key word)
INIT = 1
NOISE = 2
POINTS = 3
SEEDS = 4
CHECKS = 5

_TWO_M53 = 2.0**-53


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a_lo = a & _MASK32
    a_hi = a >> _SHIFT32
    b_lo = b & _MASK32
    b_hi = b >> _SHIFT32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _SHIFT32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _SHIFT32) + (hl >> _SHIFT32) + (mid >> _SHIFT32)
    lo = a * b
    return hi, lo


def philox4x64(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x64-10 block function.

    Parameters
    ----------
    counter : (4, n) uint64 array
    key : pair of 64-bit integers

    Returns
    -------
    (4, n) uint64 array of random words.
    """
    c0, c1, c2, c3 = (np.asarray(w, dtype=np.uint64).copy() for w in counter)
    k0 = np.uint64(key[0])
    k1 = np.uint64(key[1])
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3])


def _as_u64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint64)


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed


def random_words(seed: int, purpose: int, streams, substream: int, count: int) -> np.ndarray:
    """Raw 64-bit words, shape ``(len(streams), count)``."""
    streams = _as_u64(np.atleast_1d(streams))
    n = streams.shape[0]
    nblocks = -(-count // 4)
    out = np.empty((n, nblocks * 4), dtype=np.uint64)
    zeros = np.zeros(n, dtype=np.uint64)
    sub = np.full(n, substream, dtype=np.uint64)
    for b in range(nblocks):
        ctr = np.stack([np.full(n, b, dtype=np.uint64), sub, streams, zeros])
        out[:, 4 * b : 4 * b + 4] = philox4x64(ctr, (check_seed(seed), purpose)).T
    return out[:, :count]


def uniforms(seed: int, purpose: int, streams, substream: int, count: int) -> np.ndarray:
    """Uniforms on the open interval (0, 1), shape ``(len(streams), count)``."""
    words = random_words(seed, purpose, streams, substream, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def normals(seed: int, purpose: int, streams, substream: int, count: int) -> np.ndarray:
    """Standard Gaussians by inverse CDF of :func:`uniforms`."""
    return ndtri(uniforms(seed, purpose, streams, substream, count))


def derive_seed(seed: int, tag: int, index: int) -> int:
    """Child seed number ``index`` of ``seed`` under ``tag``.

    Adding replications appends children; existing ones never move.
    """
    words = random_words(seed, SEEDS, [index], tag, 1)
    return int(words[0, 0])
