"""Seeded hash families shared by every sketch, client and server.

All hashing goes through the SplitMix64 finalizer. A ``HashFamily`` holds k
row functions; row j hashes an item key with its own 64-bit seed derived from
the family's master seed, so the same ``(k, m, master_seed)`` gives identical
outputs on every machine and in every process.

Each function has a pure-int form for single keys and a numpy form for key
arrays. The two forms agree bit for bit.
"""

import numpy as np

from ldplcm.errors import ContractError

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GAMMA = np.uint64(GOLDEN_GAMMA)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a single 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array.

    uint64 array arithmetic wraps modulo 2**64, which is the mixer's intent.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.uint64))
    z = (z ^ (z >> _U30)) * _U_MIX1
    z = (z ^ (z >> _U27)) * _U_MIX2
    return z ^ (z >> _U31)


def derive_seed(seed: int, stream: int) -> int:
    """Derive an independent 64-bit seed for a numbered stream.

    This is output number ``stream + 1`` of a SplitMix64 generator seeded at
    ``seed``; streams are how a single run seed fans out to hash families,
    samplers and individual clients.
    """
    return mix64((seed + (stream + 1) * GOLDEN_GAMMA) & MASK64)


def derive_seed_array(seed: int, streams: np.ndarray) -> np.ndarray:
    """Vectorized ``derive_seed`` over an array of stream numbers."""
    streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
    return mix64_array(np.uint64(seed & MASK64) + (streams + np.uint64(1)) * _U_GAMMA)


class HashFamily:
    """k seeded hash functions onto ``[0, m)`` plus k sign functions onto ``{-1, +1}``.

    Row j uses the seeds ``derive_seed(master_seed, 2j)`` for columns and
    ``derive_seed(master_seed, 2j + 1)`` for signs. Instances are immutable.

    Attributes:
        k: Number of hash rows
        m: Column range
        master_seed: 64-bit seed all row seeds derive from
    """

    __slots__ = ("_k", "_m", "_master_seed", "_column_seeds", "_sign_seeds")

    def __init__(self, k: int, m: int, master_seed: int):
        if k < 1 or m < 1:
            raise ContractError(f"hash family needs k >= 1 and m >= 1, got k={k}, m={m}")
        self._k = int(k)
        self._m = int(m)
        self._master_seed = int(master_seed) & MASK64
        self._column_seeds = tuple(derive_seed(self._master_seed, 2 * j) for j in range(self._k))
        self._sign_seeds = tuple(derive_seed(self._master_seed, 2 * j + 1) for j in range(self._k))

    @property
    def k(self) -> int:
        return self._k

    @property
    def m(self) -> int:
        return self._m

    @property
    def master_seed(self) -> int:
        return self._master_seed

    def _check_row(self, j: int):
        if not 0 <= j < self._k:
            raise ContractError(f"row index {j} out of range [0, {self._k})")

    def column(self, j: int, d: int) -> int:
        """Column of item ``d`` in row ``j``."""
        self._check_row(j)
        return mix64(self._column_seeds[j] ^ (int(d) & MASK64)) % self._m

    def sign(self, j: int, d: int) -> int:
        """Sign of item ``d`` in row ``j``: +1 when the mixed value is odd."""
        self._check_row(j)
        return 1 if mix64(self._sign_seeds[j] ^ (int(d) & MASK64)) & 1 else -1

    def columns(self, keys: np.ndarray) -> np.ndarray:
        """Column of every key in every row, shape ``(k, len(keys))``."""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        seeds = np.array(self._column_seeds, dtype=np.uint64)[:, None]
        return (mix64_array(seeds ^ keys[None, :]) % np.uint64(self._m)).astype(np.int64)

    def signs(self, keys: np.ndarray) -> np.ndarray:
        """Sign of every key in every row, shape ``(k, len(keys))``, int8 values in {-1, +1}."""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        seeds = np.array(self._sign_seeds, dtype=np.uint64)[:, None]
        odd = (mix64_array(seeds ^ keys[None, :]) & np.uint64(1)).astype(np.int8)
        return 2 * odd - 1

    def columns_for_rows(self, rows: np.ndarray, keys: np.ndarray) -> np.ndarray:
        """Column of ``keys[i]`` in row ``rows[i]`` for paired arrays."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self._k):
            raise ContractError(f"row index out of range [0, {self._k})")
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        seeds = np.array(self._column_seeds, dtype=np.uint64)[rows]
        return (mix64_array(seeds ^ keys) % np.uint64(self._m)).astype(np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, HashFamily)
            and self._k == other.k
            and self._m == other.m
            and self._master_seed == other.master_seed
        )

    def __hash__(self):
        return hash((self._k, self._m, self._master_seed))

    def __repr__(self):
        return f"HashFamily(k={self._k}, m={self._m}, master_seed={self._master_seed:#x})"


def hash_column(family: HashFamily, j: int, d: int) -> int:
    """Column of item ``d`` under row function ``j`` of ``family``."""
    return family.column(j, d)


def hash_sign(family: HashFamily, j: int, d: int) -> int:
    """Sign of item ``d`` under row function ``j`` of ``family``."""
    return family.sign(j, d)
