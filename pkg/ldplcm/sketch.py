"""Sketch data structures.

``CountMinSketch`` and ``CountSketch`` are the plain, non-private sketches.
``AggregateSketch`` is the server's k x m matrix of debiased client
contributions: every received bit b of a report on row j adds
``k * (c_eps * b + 1) / 2`` to its cell.

The aggregate keeps exact integer tallies (the sum of received bits per cell
and the report count per row) and derives the real matrix from them, so
merging shards is exact and independent of absorption order.
"""

import json
import math
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from ldplcm.client import PrivacyParams, Report, ReportBatch, derive_privacy
from ldplcm.errors import ArtifactError, ConfigError, ContractError, ReportRejected
from ldplcm.hashing import HashFamily

SKETCH_MAGIC = b"LDPS"
SKETCH_FORMAT_VERSION = 1


class CountMinSketch:
    """Count-Min sketch: k rows of m counters, estimate by row-wise minimum."""

    def __init__(self, family: HashFamily):
        self.family = family
        self.counts = np.zeros((family.k, family.m), dtype=np.int64)

    @classmethod
    def from_error_bounds(cls, eps_cm: float, delta_cm: float, master_seed: int) -> "CountMinSketch":
        """Size the sketch as ``m = ceil(e / eps_cm)``, ``k = ceil(ln(1 / delta_cm))``."""
        if not (0 < eps_cm and 0 < delta_cm < 1):
            raise ConfigError(f"need eps_cm > 0 and 0 < delta_cm < 1, got {eps_cm}, {delta_cm}")
        m = math.ceil(math.e / eps_cm)
        k = max(1, math.ceil(math.log(1.0 / delta_cm)))
        return cls(HashFamily(k, m, master_seed))

    @property
    def total(self) -> int:
        """Number of updates applied (every row sums to it)."""
        return int(self.counts[0].sum())

    def update(self, x: int):
        rows = np.arange(self.family.k)
        self.counts[rows, self.family.columns([x])[:, 0]] += 1

    def update_many(self, keys: np.ndarray):
        cols = self.family.columns(keys)
        for row in range(self.family.k):
            np.add.at(self.counts[row], cols[row], 1)

    def estimate(self, x: int) -> int:
        return int(self.estimate_many([x])[0])

    def estimate_many(self, keys: np.ndarray) -> np.ndarray:
        cols = self.family.columns(keys)
        return self.counts[np.arange(self.family.k)[:, None], cols].min(axis=0)


class CountSketch:
    """Count sketch: each row adds the item's sign; estimate by mean of sign-corrected cells."""

    def __init__(self, family: HashFamily):
        self.family = family
        self.counts = np.zeros((family.k, family.m), dtype=np.int64)

    def update(self, x: int):
        rows = np.arange(self.family.k)
        self.counts[rows, self.family.columns([x])[:, 0]] += self.family.signs([x])[:, 0]

    def update_many(self, keys: np.ndarray):
        cols = self.family.columns(keys)
        signs = self.family.signs(keys).astype(np.int64)
        for row in range(self.family.k):
            np.add.at(self.counts[row], cols[row], signs[row])

    def estimate(self, x: int) -> float:
        return float(self.estimate_many([x])[0])

    def estimate_many(self, keys: np.ndarray) -> np.ndarray:
        cols = self.family.columns(keys)
        signs = self.family.signs(keys)
        cells = self.counts[np.arange(self.family.k)[:, None], cols]
        return (cells * signs).mean(axis=0)


class SketchHeader(BaseModel):
    """Self-describing header of a serialized aggregate sketch."""

    format_version: int = SKETCH_FORMAT_VERSION
    k: int
    m: int
    epsilon: float
    master_seed: int
    n: int
    theta: Optional[float] = None
    row_reports: list[int]
    config: Optional[dict[str, Any]] = None


class AggregateSketch:
    """The server's real-valued k x m matrix of transformed report contributions.

    Attributes:
        family: Hash family the clients encoded with
        params: Privacy parameters the clients perturbed with
        theta: Ratio of high-frequent mass, attached once phase 2 starts
    """

    def __init__(self, family: HashFamily, params: PrivacyParams, theta: Optional[float] = None):
        if family.m < 2:
            raise ConfigError("the aggregate sketch estimator needs m >= 2 (it divides by m - 1)")
        self.family = family
        self.params = params
        self.theta = theta
        self._tally = np.zeros((family.k, family.m), dtype=np.int64)
        self._row_reports = np.zeros(family.k, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.family.k

    @property
    def m(self) -> int:
        return self.family.m

    @property
    def n(self) -> int:
        """Number of reports absorbed since the last reset."""
        return int(self._row_reports.sum())

    @property
    def row_reports(self) -> np.ndarray:
        return self._row_reports.copy()

    @property
    def matrix(self) -> np.ndarray:
        """The matrix M: ``k/2 * (c_eps * (sum of bits) + reports on the row)`` per cell."""
        return (self.k / 2.0) * (self.params.c_epsilon * self._tally + self._row_reports[:, None])

    def reset(self):
        """Reinitialize M to all zeros."""
        self._tally[:] = 0
        self._row_reports[:] = 0

    def _check_shape(self, vectors: np.ndarray, rows: np.ndarray):
        if vectors.ndim != 2 or vectors.shape[1] != self.m:
            raise ReportRejected(f"report vectors must have length m={self.m}, got shape {vectors.shape}")
        if rows.size and (rows.min() < 0 or rows.max() >= self.k):
            raise ReportRejected(f"report row index out of range [0, {self.k})")
        if not np.all(np.abs(vectors) == 1):
            raise ReportRejected("report vectors may only hold -1 and +1")

    def absorb(self, report: Report):
        """Add one report's transformed vector to its row and count it.

        Raises:
            ReportRejected: If the vector length, its values, or the row index do not fit
        """
        vector = np.asarray(report.vector)
        self._check_shape(vector.reshape(1, -1), np.array([report.j]))
        self._tally[report.j] += vector.astype(np.int64)
        self._row_reports[report.j] += 1

    def absorb_batch(self, batch: ReportBatch):
        """Absorb many reports at once; equivalent to absorbing them one by one."""
        if len(batch) == 0:
            return
        self._check_shape(batch.vectors, batch.rows)
        for row in np.unique(batch.rows):
            self._tally[row] += batch.vectors[batch.rows == row].sum(axis=0, dtype=np.int64)
        self._row_reports += np.bincount(batch.rows, minlength=self.k)

    def compatible_with(self, other: "AggregateSketch") -> bool:
        return self.family == other.family and self.params.epsilon == other.params.epsilon

    def merge(self, other: "AggregateSketch") -> "AggregateSketch":
        """Elementwise sum of two sketches built with identical parameters."""
        if not self.compatible_with(other):
            raise ContractError(
                f"cannot merge sketches with different parameters: {self.family!r} eps={self.params.epsilon} "
                f"vs {other.family!r} eps={other.params.epsilon}"
            )
        merged = AggregateSketch(self.family, self.params, self.theta)
        merged._tally = self._tally + other._tally
        merged._row_reports = self._row_reports + other._row_reports
        return merged

    def row_sums(self, keys: np.ndarray) -> np.ndarray:
        """Sum over rows of ``M[l, h_l(d)]`` for every key."""
        cols = self.family.columns(keys)
        return self.matrix[np.arange(self.k)[:, None], cols].sum(axis=0)

    def estimate_many(self, keys: np.ndarray, theta: float = 0.0) -> np.ndarray:
        """Debiased sketch estimate ``m/(m-1) * (row_sum/k - (1 - theta) * n/m)`` per key.

        With ``theta = 0`` this is the Apple-CMS server estimator.
        """
        m, k = self.m, self.k
        correction = (1.0 - theta) * self.n / m
        return (m / (m - 1.0)) * (self.row_sums(keys) / k - correction)

    def header(self, config: Optional[dict[str, Any]] = None) -> SketchHeader:
        return SketchHeader(
            k=self.k,
            m=self.m,
            epsilon=self.params.epsilon,
            master_seed=self.family.master_seed,
            n=self.n,
            theta=self.theta,
            row_reports=[int(v) for v in self._row_reports],
            config=config,
        )

    def to_bytes(self, config: Optional[dict[str, Any]] = None) -> bytes:
        """Serialize as magic, version, header length, JSON header, then row-major little-endian doubles."""
        header = self.header(config).model_dump_json().encode("utf-8")
        body = np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()
        return SKETCH_MAGIC + struct.pack("<HI", SKETCH_FORMAT_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["AggregateSketch", SketchHeader]:
        """Rebuild a sketch (and its header) from ``to_bytes`` output.

        Raises:
            ArtifactError: On a wrong magic, unsupported version, malformed header or truncation
        """
        if len(data) < 10 or data[:4] != SKETCH_MAGIC:
            raise ArtifactError("not an ldplcm sketch file")
        version, header_len = struct.unpack_from("<HI", data, 4)
        if version != SKETCH_FORMAT_VERSION:
            raise ArtifactError(f"unsupported sketch format version {version}")
        try:
            header = SketchHeader.model_validate(json.loads(data[10 : 10 + header_len]))
        except (ValueError, ValidationError) as e:
            raise ArtifactError(f"malformed sketch header: {e}") from e
        body = data[10 + header_len :]
        if len(body) != 8 * header.k * header.m or len(header.row_reports) != header.k:
            raise ArtifactError("truncated sketch file")
        if sum(header.row_reports) != header.n:
            raise ArtifactError(f"sketch header report count {header.n} disagrees with its row counts")
        matrix = np.frombuffer(body, dtype="<f8").reshape(header.k, header.m)

        sketch = cls(HashFamily(header.k, header.m, header.master_seed), derive_privacy(header.epsilon), header.theta)
        rows = np.array(header.row_reports, dtype=np.int64)
        tally = (2.0 * matrix / header.k - rows[:, None]) / sketch.params.c_epsilon
        sketch._tally = np.rint(tally).astype(np.int64)
        sketch._row_reports = rows
        if not np.allclose(sketch.matrix, matrix, rtol=1e-9, atol=1e-6):
            raise ArtifactError("sketch matrix is inconsistent with its header")
        return sketch, header

    def save(self, path: str | Path, config: Optional[dict[str, Any]] = None):
        Path(path).write_bytes(self.to_bytes(config))

    @classmethod
    def load(cls, path: str | Path) -> tuple["AggregateSketch", SketchHeader]:
        return cls.from_bytes(Path(path).read_bytes())
