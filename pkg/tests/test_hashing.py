# pylint: disable=redefined-outer-name
"""
ldplcm Hashing Test Suite

This test suite validates the seeded hash families shared by sketches, clients
and the server.

Key Features Tested:
- SplitMix64 mixer against a published reference output
- Column and sign determinism, including across processes
- Golden fixture values frozen from the mixer
- Scalar and vectorized forms agreeing bit for bit
- Uniformity of signs and pairwise collision rates between rows
- Row range checking

Replication Guide (for Python or other languages):
1. Implement the SplitMix64 finalizer over wrapping 64-bit arithmetic
2. Derive row seeds as outputs 2j+1 and 2j+2 of a SplitMix64 stream at the master seed
3. Hash a key as mix(row_seed XOR key), reduce modulo m for columns and by low bit for signs
4. Compare against the golden values below

Dependencies for replication:
- pytest for test framework
- numpy for vectorized hashing
- subprocess for the cross-process determinism check
"""

import subprocess
import sys

import numpy as np
import pytest

from ldplcm.errors import ContractError
from ldplcm.hashing import GOLDEN_GAMMA, HashFamily, derive_seed, derive_seed_array, hash_column, hash_sign, mix64


@pytest.fixture
def family():
    """Hash family used throughout: 8 rows of 64 columns."""
    return HashFamily(k=8, m=64, master_seed=42)


def test_mix64_reference_vector():
    """
    Test the mixer against the first output of a SplitMix64 generator seeded at 0.

    Replication steps:
    1. Mix the golden gamma (state after one step from seed 0)
    2. Compare with the published reference output

    Key validations:
    - Wrapping multiplication and logical shifts match the reference
    """
    assert mix64(GOLDEN_GAMMA) == 0xE220A8397B1DCDAF
    assert derive_seed(0, 0) == 0xE220A8397B1DCDAF


def test_hash_column_golden_fixture():
    """
    Test the frozen column of key 17 under row 3 of the family seeded 0xDEADBEEF.

    Replication steps:
    1. Build HashFamily(k=4, m=1024, master_seed=0xDEADBEEF)
    2. Hash key 17 with row 3
    3. Repeat with m=64

    Key validations:
    - Raw mixed value 0x927520CBE15D2901 reduces to 257 mod 1024 and 1 mod 64
    """
    assert hash_column(HashFamily(4, 1024, 0xDEADBEEF), 3, 17) == 257
    assert hash_column(HashFamily(4, 64, 0xDEADBEEF), 3, 17) == 1
    assert hash_column(HashFamily(16, 1024, 0xDEADBEEF), 3, 17) == 257


def test_hash_sign_golden_fixture():
    """
    Test the frozen sign of key 0 under row 0 of the family seeded 1.

    Key validations:
    - The mixed value is even, so the sign is -1
    """
    assert hash_sign(HashFamily(2, 16, 1), 0, 0) == -1


def test_determinism(family):
    """
    Test that identical inputs give identical outputs.

    Replication steps:
    1. Hash the same (j, d) twice, on the same and on an equal family

    Key validations:
    - Column and sign repeat exactly
    """
    twin = HashFamily(8, 64, 42)
    assert family.column(0, 42) == family.column(0, 42) == twin.column(0, 42)
    assert family.sign(5, 42) == twin.sign(5, 42)
    assert family == twin
    assert hash(family) == hash(twin)


def test_determinism_across_processes(family):
    """
    Test that a fresh interpreter computes the same columns.

    Replication steps:
    1. Compute columns for a few keys in this process
    2. Compute them again in a subprocess
    3. Compare

    Key validations:
    - No per-process salt (unlike Python's built-in hash) leaks into hashing
    """
    code = "from ldplcm.hashing import HashFamily; f = HashFamily(8, 64, 42); print([f.column(j, 1000 + j) for j in range(8)])"
    output = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert output.strip() == str([family.column(j, 1000 + j) for j in range(8)])


def test_single_column_range():
    """A family with m=1 maps everything to column 0."""
    single = HashFamily(3, 1, 99)
    assert all(single.column(j, d) == 0 for j in range(3) for d in (0, 1, 2**63))


def test_vectorized_forms_agree(family):
    """
    Test that the numpy forms match the scalar forms bit for bit.

    Replication steps:
    1. Draw 500 random 64-bit keys
    2. Compare columns()/signs()/columns_for_rows() with column()/sign()

    Key validations:
    - Every row and key agrees, including keys above 2^63
    """
    keys = np.random.default_rng(0).integers(0, 2**64 - 1, size=500, dtype=np.uint64)
    columns = family.columns(keys)
    signs = family.signs(keys)
    rows = np.arange(500) % family.k
    paired = family.columns_for_rows(rows, keys)
    for i in range(0, 500, 7):
        d = int(keys[i])
        for j in range(family.k):
            assert columns[j, i] == family.column(j, d)
            assert signs[j, i] == family.sign(j, d)
        assert paired[i] == family.column(int(rows[i]), d)


def test_derive_seed_array_matches_scalar():
    """Vectorized seed derivation matches the scalar form."""
    streams = np.arange(100)
    expected = [derive_seed(123, int(s)) for s in streams]
    assert [int(v) for v in derive_seed_array(123, streams)] == expected


def test_sign_balance():
    """
    Test sign uniformity over 10^5 random keys.

    Replication steps:
    1. Hash 10^5 random keys through row 0's sign function
    2. Count +1 outcomes

    Key validations:
    - Fraction of +1 lies within 3 sigma of 0.5 under a binomial model
    """
    n = 100_000
    keys = np.random.default_rng(7).integers(0, 2**63, size=n, dtype=np.uint64)
    positives = int((HashFamily(1, 2, 2024).signs(keys)[0] == 1).sum())
    assert abs(positives - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_pairwise_collision_rate():
    """
    Test that two rows behave like independent hashes.

    Replication steps:
    1. Draw 10^4 random key pairs
    2. Count pairs colliding in row 0 and, separately, in row 1

    Key validations:
    - Each rate lies within 3 sigma of 1/m
    """
    m, n = 64, 10_000
    rng = np.random.default_rng(11)
    a = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    b = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    fam = HashFamily(2, m, 5)
    sigma = np.sqrt(n * (1 / m) * (1 - 1 / m))
    for row in range(2):
        collisions = int((fam.columns(a)[row] == fam.columns(b)[row]).sum())
        assert abs(collisions - n / m) <= 3 * sigma


def test_row_out_of_range(family):
    """
    Test the row index contract.

    Key validations:
    - Negative and too-large rows raise ContractError for columns and signs
    - Invalid family shapes are refused
    """
    with pytest.raises(ContractError):
        family.column(8, 1)
    with pytest.raises(ContractError):
        family.sign(-1, 1)
    with pytest.raises(ContractError):
        family.columns_for_rows(np.array([0, 9]), np.array([1, 2]))
    with pytest.raises(ContractError):
        HashFamily(0, 4, 1)
