"""Datasets: Zipf generation, CSV ingestion and the files they are stored in.

Item keys are dense: a dataset over ``domain_size`` items uses keys
``0 .. domain_size - 1``. Generated Zipf data relabels its realized ranks in
ascending order, so key 0 is the most popular rank that was drawn. Ingested
CSV tokens get keys in first-seen order and keep a key mapping.
"""

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from loguru import logger

from ldplcm.errors import ArtifactError, ConfigError, IngestError
from ldplcm.utils import config_comment, read_csv_rows, write_csv

DEFAULT_MAX_RANK = 4_194_304


@dataclass
class Dataset:
    """A multiset of item keys with its exact frequencies.

    Attributes:
        records: Item key of every client, in client order
        domain_size: Number of distinct keys
        ground_truth: Exact frequency f(d) of every key
        tokens: Original token of every key, for ingested data
    """

    records: np.ndarray
    domain_size: int
    ground_truth: np.ndarray = field(default=None)
    tokens: Optional[list[str]] = None

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=np.uint64)
        if self.records.size and int(self.records.max()) >= self.domain_size:
            raise ConfigError(f"record key {int(self.records.max())} outside domain of size {self.domain_size}")
        if self.ground_truth is None:
            self.ground_truth = np.bincount(self.records.astype(np.int64), minlength=self.domain_size)

    @property
    def n(self) -> int:
        return int(self.records.shape[0])

    @property
    def keys(self) -> np.ndarray:
        return np.arange(self.domain_size, dtype=np.uint64)


@functools.lru_cache(maxsize=2)
def _zipf_cdf(s: float, max_rank: int) -> np.ndarray:
    weights = np.arange(1, max_rank + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def gen_zipf(n: int, s: float, max_rank: int = DEFAULT_MAX_RANK, seed: int = 0) -> Dataset:
    """Draw n records i.i.d. with ``P(rank) ∝ rank^-s`` over ranks ``1 .. max_rank``.

    Args:
        n: Number of records
        s: Skewness, 0 gives a uniform distribution
        max_rank: Largest rank that can be drawn
        seed: Generator seed

    Returns:
        Dataset whose domain is the set of realized ranks, relabeled densely
    """
    if n < 1 or s < 0 or max_rank < 1:
        raise ConfigError(f"zipf needs n >= 1, s >= 0 and max_rank >= 1, got n={n}, s={s}, max_rank={max_rank}")
    rng = np.random.default_rng(seed)
    cdf = _zipf_cdf(float(s), int(max_rank))
    ranks = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), max_rank - 1)
    _, records = np.unique(ranks, return_inverse=True)
    dataset = Dataset(records=records.reshape(-1), domain_size=int(records.max()) + 1)
    logger.debug(f"Generated {n} zipf records (s={s}) over a realized domain of {dataset.domain_size}")
    return dataset


def ingest_csv(path: str | Path) -> Dataset:
    """Read a dataset of ``token`` or ``token,count`` lines.

    Blank lines and lines starting with ``#`` are skipped. Tokens receive keys
    in first-seen order; a ``token,count`` line stands for ``count`` records.

    Raises:
        IngestError: If the file cannot be read or a line is malformed
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise IngestError(f"cannot read {path}: {e}") from e

    index: dict[str, int] = {}
    keys: list[int] = []
    counts: list[int] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        row = next(csv.reader([line]))
        if len(row) > 2:
            raise IngestError(f"expected 'token' or 'token,count', got {len(row)} fields", line=line_no)
        token = row[0].strip()
        if not token:
            raise IngestError("empty item token", line=line_no)
        count = 1
        if len(row) == 2:
            try:
                count = int(row[1])
            except ValueError as e:
                raise IngestError(f"count {row[1]!r} is not an integer", line=line_no) from e
            if count < 0:
                raise IngestError(f"count must be non-negative, got {count}", line=line_no)
        keys.append(index.setdefault(token, len(index)))
        counts.append(count)

    if not index:
        raise IngestError(f"{path} holds no items")
    records = np.repeat(np.array(keys, dtype=np.uint64), np.array(counts, dtype=np.int64))
    logger.debug(f"Ingested {records.shape[0]} records over {len(index)} tokens from {path}")
    return Dataset(records=records, domain_size=len(index), tokens=list(index))


def save_key_mapping(path: str | Path, tokens: list[str], config: Optional[dict[str, Any]] = None):
    """Write the ``key,token`` mapping of an ingested dataset."""
    write_csv(path, ["key", "token"], enumerate(tokens), config)


def load_key_mapping(path: str | Path) -> list[str]:
    """Read a mapping written by ``save_key_mapping``; the token list is indexed by key."""
    tokens = []
    for line_no, row in read_csv_rows(path, header=["key", "token"]):
        if len(row) != 2 or row[0] != str(len(tokens)):
            raise IngestError("key mapping rows must be dense and in key order", line=line_no)
        tokens.append(row[1])
    return tokens


def write_dataset(out_dir: str | Path, dataset: Dataset, config: Optional[dict[str, Any]] = None) -> dict[str, Path]:
    """Write ``items.csv`` (one key per record), ``ground_truth.csv`` and, for ingested data, ``key_mapping.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"items": out_dir / "items.csv", "ground_truth": out_dir / "ground_truth.csv"}
    with open(written["items"], "w", encoding="utf-8", newline="") as f:
        f.write(config_comment(config) + "\n")
        np.savetxt(f, dataset.records, fmt="%d")
    write_ground_truth(written["ground_truth"], dataset.ground_truth, config)
    if dataset.tokens is not None:
        written["key_mapping"] = out_dir / "key_mapping.csv"
        save_key_mapping(written["key_mapping"], dataset.tokens, config)
    return written


def write_ground_truth(path: str | Path, ground_truth: np.ndarray, config: Optional[dict[str, Any]] = None):
    write_csv(path, ["item", "count"], ((key, int(c)) for key, c in enumerate(ground_truth)), config)


def read_ground_truth(path: str | Path) -> np.ndarray:
    """Frequencies from a ``ground_truth.csv``, indexed by item key."""
    counts = []
    for line_no, row in read_csv_rows(path, header=["item", "count"]):
        try:
            item, count = int(row[0]), int(row[1])
        except (ValueError, IndexError) as e:
            raise ArtifactError(f"line {line_no}: malformed ground-truth row {row}") from e
        if item != len(counts):
            raise ArtifactError(f"line {line_no}: ground-truth items must be dense and in key order")
        counts.append(count)
    return np.array(counts, dtype=np.int64)
