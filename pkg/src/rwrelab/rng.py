"""Counter-based random numbers keyed on lattice sites.

Every random quantity in the package is a pure function of a 64-bit key and a
counter, so results never depend on evaluation order or on how work is split
between processes.  The mixing function is the SplitMix64 finalizer; it is
applied to whole numpy arrays of keys at once.
"""
from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

MASK64 = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def _u64(x: int) -> np.uint64:
    return np.uint64(int(x) & MASK64)


def site_keys(seed: int, sites) -> np.ndarray:
    """Hash ``(seed, site)`` pairs to 64-bit keys.

    ``sites`` is an integer array of shape ``(n, d)``.  Coordinates are
    zigzag-encoded so negative and positive coordinates never share a code.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    zz = ((sites << 1) ^ (sites >> 63)).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = mix64(np.full(sites.shape[0], _u64(seed), dtype=np.uint64) + GOLDEN)
        for i in range(sites.shape[1]):
            h = mix64(h ^ (zz[:, i] + GOLDEN * np.uint64(i + 1)))
    return h


def uniforms(keys, count: int) -> np.ndarray:
    """``count`` uniforms in [0, 1) per key, shape ``(len(keys), count)``."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    ctr = np.arange(1, count + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        bits = mix64(keys + ctr * GOLDEN)
    return (bits >> _S11).astype(np.float64) * _INV53


def derive_seed(master: int, *labels) -> int:
    """Derive a named 64-bit sub-seed from a master seed by keyed hashing."""
    h = hashlib.blake2b(digest_size=8, key=str(int(master) & MASK64).encode())
    h.update("\x1f".join(str(x) for x in labels).encode())
    return int.from_bytes(h.digest(), "little")
