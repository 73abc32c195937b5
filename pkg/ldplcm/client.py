"""Client side of the protocol.

A client one-hot encodes its item under a randomly chosen hash row (the
Apple-CMS client), or, in phase 2 when the published frequency model marks
its item as high-frequent, sends an all-(-1) dummy instead. Either vector is
then sign-flipped bit by bit with probability ``1 / (e^(eps/2) + 1)``.

Randomness comes from ``ClientRng``, a counter-based SplitMix64 stream. Draw 1
picks the hash row, draws 2..m+1 decide the bit flips. Because every draw is
a pure function of (seed, counter), ``client_report`` for one client and
``client_reports_batch`` for many produce identical reports.
"""

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ldplcm.errors import ArtifactError, ConfigError, ContractError
from ldplcm.hashing import GOLDEN_GAMMA, MASK64, HashFamily, derive_seed, mix64, mix64_array

_UNIT = 1.0 / 9007199254740992.0  # 2**-53
_U11 = np.uint64(11)
_U_GAMMA = np.uint64(GOLDEN_GAMMA)

REPORT_LOG_MAGIC = b"LDPR"
REPORT_LOG_VERSION = 1


class PrivacyParams(BaseModel):
    """Privacy budget and the constants derived from it.

    Attributes:
        epsilon: Privacy budget, strictly positive
        p_flip: Probability of negating each bit, ``1 / (e^(eps/2) + 1)``
        c_epsilon: Debiasing constant ``(e^(eps/2) + 1) / (e^(eps/2) - 1)``
    """

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(gt=0)
    p_flip: float
    c_epsilon: float

    @property
    def tight_ratio(self) -> float:
        """Largest output probability ratio the mechanism actually attains, ``e^(eps/2)``."""
        return (1.0 - self.p_flip) / self.p_flip if self.p_flip > 0 else math.inf


def derive_privacy(epsilon: float) -> PrivacyParams:
    """Build ``PrivacyParams`` for a privacy budget.

    Args:
        epsilon: Privacy budget, must be > 0

    Returns:
        PrivacyParams with the flip probability and debiasing constant

    Raises:
        ConfigError: If epsilon is not a positive finite number
    """
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise ConfigError(f"epsilon must be a positive finite number, got {epsilon!r}")
    half = epsilon / 2.0
    if half > 700.0:
        return PrivacyParams(epsilon=epsilon, p_flip=0.0, c_epsilon=1.0)
    return PrivacyParams(
        epsilon=epsilon,
        p_flip=1.0 / (math.exp(half) + 1.0),
        c_epsilon=1.0 + 2.0 / math.expm1(half),
    )


class FrequencyPredictor(Protocol):
    """What clients and the server need from a published frequency model."""

    boundary: Optional[float]

    def predict_many(self, keys: np.ndarray) -> np.ndarray: ...

    def is_high(self, d: int) -> bool: ...

    def is_high_many(self, keys: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Report:
    """What one client transmits: a perturbed +-1 vector and its hash row."""

    vector: np.ndarray
    j: int


@dataclass(frozen=True)
class ReportBatch:
    """Many reports stored column-wise.

    Attributes:
        vectors: int8 array of shape (n, m) with entries in {-1, +1}
        rows: int64 array of shape (n,) with hash rows
    """

    vectors: np.ndarray
    rows: np.ndarray

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def __iter__(self) -> Iterator[Report]:
        for vector, j in zip(self.vectors, self.rows):
            yield Report(vector=vector, j=int(j))

    @classmethod
    def from_reports(cls, reports: list[Report], m: int) -> "ReportBatch":
        if not reports:
            return cls(vectors=np.empty((0, m), dtype=np.int8), rows=np.empty(0, dtype=np.int64))
        return cls(
            vectors=np.stack([np.asarray(r.vector, dtype=np.int8) for r in reports]),
            rows=np.array([r.j for r in reports], dtype=np.int64),
        )


class ClientRng:
    """Counter-based pseudorandom stream for one client.

    Draw number i (1-based) is ``mix64(seed + i * GOLDEN_GAMMA)``.

    Attributes:
        seed: 64-bit stream seed
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._counter = 0

    @classmethod
    def for_client(cls, run_seed: int, client_index: int) -> "ClientRng":
        """Stream for client ``client_index`` of a run."""
        return cls(derive_seed(run_seed, client_index))

    @property
    def draws(self) -> int:
        """Number of values drawn so far."""
        return self._counter

    def next_u64(self) -> int:
        self._counter += 1
        return mix64((self.seed + self._counter * GOLDEN_GAMMA) & MASK64)

    def randbelow(self, n: int) -> int:
        """Integer in ``[0, n)`` from one draw."""
        return self.next_u64() % n

    def uniforms(self, count: int) -> np.ndarray:
        """Next ``count`` draws as doubles in ``[0, 1)``."""
        block = draw_block(np.array([self.seed], dtype=np.uint64), self._counter, count)[0]
        self._counter += count
        return to_unit(block)


def draw_block(seeds: np.ndarray, start: int, count: int) -> np.ndarray:
    """Draws ``start+1 .. start+count`` of every stream, shape ``(len(seeds), count)``."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return mix64_array(seeds[:, None] + counters[None, :] * _U_GAMMA)


def to_unit(draws: np.ndarray) -> np.ndarray:
    """Map uint64 draws onto ``[0, 1)`` using their top 53 bits."""
    return (draws >> _U11).astype(np.float64) * _UNIT


def encode_low(d: int, family: HashFamily, j: int) -> np.ndarray:
    """One-hot +-1 encoding of ``d`` under row ``j``: +1 at ``h_j(d)``, -1 elsewhere."""
    vector = np.full(family.m, -1, dtype=np.int8)
    vector[family.column(j, d)] = 1
    return vector


def encode_high(m: int) -> np.ndarray:
    """Dummy encoding sent for high-frequent items: all -1."""
    if m < 1:
        raise ContractError(f"vector width must be >= 1, got {m}")
    return np.full(m, -1, dtype=np.int8)


def perturb(v: np.ndarray, params: PrivacyParams, rng: ClientRng) -> np.ndarray:
    """Negate each bit of ``v`` independently with probability ``params.p_flip``."""
    v = np.asarray(v, dtype=np.int8)
    flips = rng.uniforms(v.shape[0]) < params.p_flip
    return np.where(flips, -v, v).astype(np.int8)


def _require_model(phase: int, model: Optional[FrequencyPredictor]):
    if phase not in (1, 2):
        raise ContractError(f"phase must be 1 or 2, got {phase}")
    if phase == 2:
        if model is None:
            raise ContractError("phase 2 requires a published frequency model")
        if model.boundary is None:
            raise ContractError("phase 2 requires the frequency boundary P to be set")


def client_encode(
    d: int, phase: int, model: Optional[FrequencyPredictor], family: HashFamily, j: int
) -> tuple[np.ndarray, bool]:
    """Pre-perturbation encoding of ``d`` and whether the high-frequent branch was taken."""
    _require_model(phase, model)
    if phase == 2 and model.is_high(d):
        return encode_high(family.m), True
    return encode_low(d, family, j), False


def client_report(
    d: int,
    phase: int,
    model: Optional[FrequencyPredictor],
    params: PrivacyParams,
    family: HashFamily,
    rng: ClientRng,
) -> Report:
    """Run the client algorithm for one item.

    Args:
        d: The client's item key
        phase: 1 (model training) or 2 (sketch construction)
        model: Published frequency model with boundary P; required in phase 2
        params: Privacy parameters
        family: Hash family shared with the server
        rng: This client's random stream

    Returns:
        The report to transmit

    Raises:
        ContractError: On an unknown phase, or phase 2 without a usable model
    """
    _require_model(phase, model)
    j = rng.randbelow(family.k)
    vector, _ = client_encode(d, phase, model, family, j)
    return Report(vector=perturb(vector, params, rng), j=j)


def client_reports_batch(
    items: np.ndarray,
    seeds: np.ndarray,
    phase: int,
    model: Optional[FrequencyPredictor],
    params: PrivacyParams,
    family: HashFamily,
) -> tuple[ReportBatch, np.ndarray]:
    """Vectorized ``client_report`` for many clients.

    Args:
        items: Item key of each client
        seeds: ``ClientRng`` seed of each client
        phase: 1 or 2
        model: Published frequency model; required in phase 2
        params: Privacy parameters
        family: Hash family

    Returns:
        The report batch and a boolean mask of clients that took the high-frequent branch
    """
    _require_model(phase, model)
    items = np.asarray(items, dtype=np.uint64)
    draws = draw_block(seeds, 0, family.m + 1)
    rows = (draws[:, 0] % np.uint64(family.k)).astype(np.int64)
    flips = to_unit(draws[:, 1:]) < params.p_flip
    if phase == 2:
        high = np.asarray(model.is_high_many(items), dtype=bool)
    else:
        high = np.zeros(items.shape[0], dtype=bool)

    vectors = np.full((items.shape[0], family.m), -1, dtype=np.int8)
    low = np.flatnonzero(~high)
    vectors[low, family.columns_for_rows(rows[low], items[low])] = 1
    vectors[flips] *= -1
    return ReportBatch(vectors=vectors, rows=rows), high


def encode_report(report: Report) -> bytes:
    """Wire form: little-endian uint16 row, then the vector bit-packed (+1 -> 1) LSB first.

    Raises:
        ContractError: If the row index does not fit the uint16 field
    """
    if not 0 <= report.j <= 0xFFFF:
        raise ContractError(f"row index {report.j} does not fit the uint16 wire field")
    bits = (np.asarray(report.vector) > 0).astype(np.uint8)
    return struct.pack("<H", report.j) + np.packbits(bits, bitorder="little").tobytes()


def decode_report(data: bytes, m: int) -> Report:
    """Inverse of ``encode_report`` for vectors of width ``m``."""
    expected = 2 + (m + 7) // 8
    if len(data) != expected:
        raise ArtifactError(f"report record has {len(data)} bytes, expected {expected}")
    (j,) = struct.unpack_from("<H", data)
    bits = np.unpackbits(np.frombuffer(data[2:], dtype=np.uint8), count=m, bitorder="little")
    return Report(vector=(2 * bits.astype(np.int8) - 1), j=j)


def write_report_log(stream: BinaryIO, reports, m: int) -> int:
    """Write reports as a length-prefixed binary log and return the record count."""
    stream.write(REPORT_LOG_MAGIC + struct.pack("<HI", REPORT_LOG_VERSION, m))
    count = 0
    for report in reports:
        record = encode_report(report)
        stream.write(struct.pack("<I", len(record)) + record)
        count += 1
    return count


def read_report_log(stream: BinaryIO) -> Iterator[Report]:
    """Yield the reports of a log written by ``write_report_log``."""
    header = stream.read(10)
    if len(header) < 10 or header[:4] != REPORT_LOG_MAGIC:
        raise ArtifactError("not a report log")
    version, m = struct.unpack("<HI", header[4:])
    if version != REPORT_LOG_VERSION:
        raise ArtifactError(f"unsupported report log version {version}")
    while True:
        prefix = stream.read(4)
        if not prefix:
            return
        if len(prefix) < 4:
            raise ArtifactError("truncated report log")
        (length,) = struct.unpack("<I", prefix)
        record = stream.read(length)
        if len(record) < length:
            raise ArtifactError("truncated report log")
        yield decode_report(record, m)
