"""End-to-end protocol runs over a simulated client population.

``run_protocol`` executes both phases: a uniformly sampled ``floor(r * n)``
clients report with the Apple-CMS client, the server trains the frequency
model on their sketch and publishes it with its boundary, the matrix is
reinitialized, and every remaining client reports with the phase-2 client.
``run_apple_cms`` runs the single-phase baseline on the same data.

All randomness derives from the config seed through numbered streams:

    0  hash family          4  dataset generation
    1  phase-1 sampling     5  Apple-CMS baseline clients
    2  client randomness    6  trial seeds
    3  training-item sampling

Client simulation is split into fixed-size chunks whose partial sketches are
merged; merging is exact, so results do not depend on the worker count.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Optional, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from ldplcm.client import FrequencyPredictor, PrivacyParams, client_reports_batch, derive_privacy
from ldplcm.config import ExperimentConfig
from ldplcm.datasets import Dataset, gen_zipf, ingest_csv
from ldplcm.errors import ContractError
from ldplcm.frequency_model import FrequencyModel, SketchBinding, TableModel, serialize, theta_boundary
from ldplcm.hashing import HashFamily, derive_seed, derive_seed_array
from ldplcm.server import LdpServer
from ldplcm.sketch import AggregateSketch

STREAM_HASH = 0
STREAM_SAMPLING = 1
STREAM_CLIENTS = 2
STREAM_TRAINING = 3
STREAM_DATASET = 4
STREAM_BASELINE = 5
STREAM_TRIALS = 6

CHUNK_SIZE = 8192


def sse(truth, estimates) -> float:
    """Sum of squared errors over aligned frequency vectors."""
    truth = np.asarray(truth, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    if truth.shape != estimates.shape:
        raise ContractError(f"truth and estimates are misaligned: {truth.shape} vs {estimates.shape}")
    return float(np.sum((truth - estimates) ** 2))


def mse(truth, estimates, d: Optional[int] = None) -> float:
    """SSE divided by the domain size ``d`` (the vector length by default)."""
    d = len(np.atleast_1d(truth)) if d is None else d
    if d < 1:
        raise ContractError(f"domain size must be >= 1, got {d}")
    return sse(truth, estimates) / d


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """The dataset a config names; Zipf data is drawn from the dataset stream of the seed."""
    if cfg.dataset.csv is not None:
        return ingest_csv(cfg.dataset.csv.path)
    zipf = cfg.dataset.zipf
    return gen_zipf(zipf.n, zipf.s, zipf.max_rank, derive_seed(cfg.seed, STREAM_DATASET))


def simulate_population(
    items: np.ndarray,
    client_seeds: np.ndarray,
    phase: int,
    model: Optional[FrequencyPredictor],
    params: PrivacyParams,
    family: HashFamily,
    jobs: int = 1,
    progress: bool = False,
) -> tuple[AggregateSketch, int]:
    """Simulate every client's report and aggregate them.

    Args:
        items: Item key of each client
        client_seeds: ``ClientRng`` seed of each client
        phase: 1 or 2
        model: Published frequency model, required in phase 2
        params: Privacy parameters
        family: Hash family
        jobs: Worker threads for chunks of clients
        progress: Show a tqdm progress bar

    Returns:
        The aggregated sketch and the number of clients that sent a dummy
    """
    starts = list(range(0, len(items), CHUNK_SIZE))

    def work(start: int) -> tuple[AggregateSketch, int]:
        stop = start + CHUNK_SIZE
        shard = AggregateSketch(family, params)
        batch, high = client_reports_batch(items[start:stop], client_seeds[start:stop], phase, model, params, family)
        shard.absorb_batch(batch)
        return shard, int(high.sum())

    bar = tqdm(total=len(starts), desc=f"Phase {phase} clients", unit="chunk", disable=not progress, leave=False)
    with bar:
        if jobs <= 1:
            shards = []
            for start in starts:
                shards.append(work(start))
                bar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                shards = []
                for result in pool.map(work, starts):
                    shards.append(result)
                    bar.update(1)

    empty = AggregateSketch(family, params)
    sketch = reduce(lambda acc, shard: acc.merge(shard[0]), shards, empty)
    return sketch, sum(high for _, high in shards)


@dataclass
class RunResult:
    """Outcome of one run of LDPLCM or of the Apple-CMS baseline.

    ``true_high`` partitions the domain by the theta-prefix rule over the true
    frequencies; ``branches`` is the model's own classification (``True`` for
    items answered by the model).
    """

    method: str
    config: dict[str, Any]
    keys: np.ndarray
    truth: np.ndarray
    estimates: np.ndarray
    branches: np.ndarray
    true_high: np.ndarray
    n_phase1: int
    n_phase2: int
    n_dummy: int
    rejected: int
    boundary: Optional[float]
    sketch: AggregateSketch
    model: Optional[Union[FrequencyModel, TableModel]] = None
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def domain_size(self) -> int:
        return int(self.keys.shape[0])

    @property
    def sse_total(self) -> float:
        return sse(self.truth, self.estimates)

    @property
    def sse_high(self) -> float:
        return sse(self.truth[self.true_high], self.estimates[self.true_high])

    @property
    def sse_low(self) -> float:
        return sse(self.truth[~self.true_high], self.estimates[~self.true_high])

    @property
    def sse_model_high(self) -> float:
        return sse(self.truth[self.branches], self.estimates[self.branches])

    @property
    def sse_model_low(self) -> float:
        return sse(self.truth[~self.branches], self.estimates[~self.branches])

    @property
    def mse(self) -> float:
        return mse(self.truth, self.estimates, self.domain_size)

    def sketch_binding(self) -> SketchBinding:
        family = self.sketch.family
        return SketchBinding(k=family.k, m=family.m, epsilon=self.sketch.params.epsilon, master_seed=family.master_seed)

    def model_bytes(self) -> bytes:
        if self.model is None:
            return b""
        return serialize(self.model, self.sketch_binding(), self.config)

    def sketch_bytes(self) -> bytes:
        return self.sketch.to_bytes(self.artifact_config())

    def artifact_config(self) -> dict[str, Any]:
        """Config embedded in artifacts, with the realized domain size added."""
        return {**self.config, "domain_size": self.domain_size}

    @property
    def space_bytes(self) -> int:
        """Serialized model plus the sketch's ``k * m`` doubles."""
        return len(self.model_bytes()) + 8 * self.sketch.k * self.sketch.m

    def summary(self) -> dict[str, Any]:
        """Deterministic result summary; wall times are kept out of it."""
        return {
            "method": self.method,
            "config": self.config,
            "domain_size": self.domain_size,
            "clients": {"phase1": self.n_phase1, "phase2": self.n_phase2, "dummies": self.n_dummy},
            "rejected_reports": self.rejected,
            "boundary": self.boundary,
            "true_high_items": int(self.true_high.sum()),
            "model_high_items": int(self.branches.sum()),
            "sse_total": self.sse_total,
            "sse_high": self.sse_high,
            "sse_low": self.sse_low,
            "sse_model_high": self.sse_model_high,
            "sse_model_low": self.sse_model_low,
            "mse": self.mse,
            "model_bytes": len(self.model_bytes()),
            "sketch_bytes": 8 * self.sketch.k * self.sketch.m,
            "space_bytes": self.space_bytes,
        }

    def rows(self, clamp_nonnegative: bool = False):
        """``item, true_count, estimate, branch`` rows for the per-item CSV."""
        estimates = np.maximum(self.estimates, 0.0) if clamp_nonnegative else self.estimates
        for key, count, estimate, high in zip(self.keys, self.truth, estimates, self.branches):
            yield int(key), int(count), repr(float(estimate)), "model" if high else "sketch"


def _true_partition(truth: np.ndarray, keys: np.ndarray, theta: float) -> np.ndarray:
    return truth >= theta_boundary(truth, keys, theta)


def _client_seeds(run_seed: int, count: int) -> np.ndarray:
    return derive_seed_array(run_seed, np.arange(count, dtype=np.uint64))


def run_protocol(
    cfg: ExperimentConfig, jobs: int = 1, dataset: Optional[Dataset] = None, progress: bool = False
) -> RunResult:
    """Run both LDPLCM phases over the config's dataset.

    Args:
        cfg: Experiment configuration
        jobs: Worker threads for client simulation; results do not depend on it
        dataset: Pre-loaded dataset, instead of the one the config names
        progress: Show tqdm progress bars

    Returns:
        Estimates for every domain item plus metrics

    Raises:
        ContractError: If either phase would have no clients
    """
    dataset = dataset if dataset is not None else load_dataset(cfg)
    n = dataset.n
    n_phase1 = math.floor(cfg.r * n)
    if n_phase1 < 1 or n_phase1 >= n:
        raise ContractError(f"r={cfg.r} over {n} clients leaves phase 1 with {n_phase1} and phase 2 with {n - n_phase1}")

    timing = {}
    params = derive_privacy(cfg.epsilon)
    family = HashFamily(cfg.k, cfg.m, derive_seed(cfg.seed, STREAM_HASH))
    seeds = _client_seeds(derive_seed(cfg.seed, STREAM_CLIENTS), n)
    sampler = np.random.default_rng(derive_seed(cfg.seed, STREAM_SAMPLING))
    in_phase1 = np.zeros(n, dtype=bool)
    in_phase1[sampler.choice(n, size=n_phase1, replace=False)] = True

    server = LdpServer(family, params, cfg.theta, cfg.r)
    started = time.perf_counter()
    sketch, _ = simulate_population(
        dataset.records[in_phase1], seeds[in_phase1], 1, None, params, family, jobs, progress
    )
    server.absorb_shard(sketch)
    timing["phase1_seconds"] = time.perf_counter() - started

    started = time.perf_counter()
    if cfg.model == "oracle":
        server.publish(TableModel.oracle(dataset.ground_truth, cfg.theta))
    else:
        trainer = np.random.default_rng(derive_seed(cfg.seed, STREAM_TRAINING))
        server.train_model(dataset.domain_size, cfg.t, cfg.boosting, trainer)
    timing["training_seconds"] = time.perf_counter() - started

    server.begin_phase_two()
    started = time.perf_counter()
    sketch, n_dummy = simulate_population(
        dataset.records[~in_phase1], seeds[~in_phase1], 2, server.model, params, family, jobs, progress
    )
    server.absorb_shard(sketch)
    timing["phase2_seconds"] = time.perf_counter() - started
    logger.debug(
        f"Phase 2 absorbed {server.sketch.n} reports, {n_dummy} dummies, boundary P={server.model.boundary:.6g}"
    )

    keys = dataset.keys
    started = time.perf_counter()
    estimates, branches = server.estimate_many(keys)
    elapsed = time.perf_counter() - started
    timing["estimation_seconds"] = elapsed
    timing["query_seconds"] = elapsed / keys.shape[0]

    return RunResult(
        method="ldplcm",
        config=cfg.resolved(),
        keys=keys,
        truth=dataset.ground_truth,
        estimates=estimates,
        branches=branches,
        true_high=_true_partition(dataset.ground_truth, keys, cfg.theta),
        n_phase1=n_phase1,
        n_phase2=server.reports_by_phase[2],
        n_dummy=n_dummy,
        rejected=server.rejected,
        boundary=server.model.boundary,
        sketch=server.sketch,
        model=server.model,
        timing=timing,
    )


def run_apple_cms(
    cfg: ExperimentConfig, jobs: int = 1, dataset: Optional[Dataset] = None, progress: bool = False
) -> RunResult:
    """Run the single-phase Apple-CMS baseline: every client reports, no model."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    params = derive_privacy(cfg.epsilon)
    family = HashFamily(cfg.k, cfg.m, derive_seed(cfg.seed, STREAM_HASH))
    seeds = _client_seeds(derive_seed(cfg.seed, STREAM_BASELINE), dataset.n)

    server = LdpServer(family, params, cfg.theta)
    started = time.perf_counter()
    sketch, _ = simulate_population(dataset.records, seeds, 1, None, params, family, jobs, progress)
    server.absorb_shard(sketch)
    timing = {"phase1_seconds": time.perf_counter() - started}

    keys = dataset.keys
    started = time.perf_counter()
    estimates = server.sketch.estimate_many(keys, theta=0.0)
    elapsed = time.perf_counter() - started
    timing["estimation_seconds"] = elapsed
    timing["query_seconds"] = elapsed / keys.shape[0]

    return RunResult(
        method="apple-cms",
        config=cfg.resolved(),
        keys=keys,
        truth=dataset.ground_truth,
        estimates=estimates,
        branches=np.zeros(keys.shape[0], dtype=bool),
        true_high=_true_partition(dataset.ground_truth, keys, cfg.theta),
        n_phase1=dataset.n,
        n_phase2=0,
        n_dummy=0,
        rejected=server.rejected,
        boundary=None,
        sketch=server.sketch,
        timing=timing,
    )
