"""Server side of the protocol: aggregation, model training and estimation.

Phase 1 aggregates the sampled clients' reports, trains the frequency model
on scaled sketch estimates and fixes the boundary P. Phase 2 starts from a
zeroed matrix, aggregates everyone else, and answers queries either from the
model (``g(d) >= P``) or from the sketch with the ``(1 - theta)`` correction
that removes the dummy reports' expected mass.
"""

from typing import Optional, Union

import numpy as np
from loguru import logger

from ldplcm.client import PrivacyParams, Report, ReportBatch
from ldplcm.errors import ConfigError, ContractError, ReportRejected
from ldplcm.frequency_model import (
    BoostingParams,
    FrequencyModel,
    TableModel,
    build_training_set,
    compute_boundary,
    fit,
)
from ldplcm.hashing import HashFamily
from ldplcm.sketch import AggregateSketch


class LdpServer:
    """Server state across both phases.

    Attributes:
        phase: 1 while training the model, 2 while building the sketch
        sketch: The aggregate matrix of the current phase
        model: Published frequency model, set at the end of phase 1
        theta: Ratio of mass attributed to high-frequent items
        r: Phase-1 sampling rate
        rejected: Number of malformed reports refused
        reports_by_phase: Reports accepted in each phase
    """

    def __init__(self, family: HashFamily, params: PrivacyParams, theta: float, r: Optional[float] = None):
        if not 0 <= theta <= 1:
            raise ConfigError(f"theta must be in [0, 1], got {theta}")
        self.phase = 1
        self.sketch = AggregateSketch(family, params)
        self.model: Optional[Union[FrequencyModel, TableModel]] = None
        self.theta = theta
        self.r = r
        self.rejected = 0
        self.reports_by_phase = {1: 0, 2: 0}

    @classmethod
    def restore(cls, sketch: AggregateSketch, model: Union[FrequencyModel, TableModel]) -> "LdpServer":
        """Rebuild a phase-2 server from a persisted sketch and its published model."""
        if model.theta is None or model.boundary is None:
            raise ContractError("the model file carries no boundary P or theta")
        if sketch.theta is not None and sketch.theta != model.theta:
            raise ContractError(f"sketch theta {sketch.theta} disagrees with model theta {model.theta}")
        server = cls(sketch.family, sketch.params, model.theta)
        server.sketch = sketch
        server.sketch.theta = model.theta
        server.model = model
        server.phase = 2
        server.reports_by_phase[2] = sketch.n
        return server

    @property
    def family(self) -> HashFamily:
        return self.sketch.family

    @property
    def params(self) -> PrivacyParams:
        return self.sketch.params

    def absorb_report(self, rep: Report) -> bool:
        """Aggregate one report; malformed reports are counted and dropped."""
        try:
            self.sketch.absorb(rep)
        except ReportRejected as e:
            self.rejected += 1
            logger.warning(f"Rejected report: {e}")
            return False
        self.reports_by_phase[self.phase] += 1
        return True

    def absorb_batch(self, batch: ReportBatch):
        self.sketch.absorb_batch(batch)
        self.reports_by_phase[self.phase] += len(batch)

    def absorb_shard(self, shard: AggregateSketch):
        """Merge a sketch aggregated elsewhere (for example by a worker) into this phase."""
        self.sketch = self.sketch.merge(shard)
        self.reports_by_phase[self.phase] += shard.n

    def train_model(
        self, domain_size: int, t: int, hyper: BoostingParams, rng: np.random.Generator
    ) -> FrequencyModel:
        """Train g on t sampled domain items and compute the boundary P.

        P comes from the model's predictions over the whole domain, accumulated
        until they pass theta times the estimated population ``n1 / r``.
        """
        if self.phase != 1:
            raise ContractError("the frequency model is trained from the phase-1 sketch")
        if self.r is None:
            raise ContractError("training needs the phase-1 sampling rate r")
        training = build_training_set(self.sketch, domain_size, t, self.r, rng)
        model = fit(training, hyper)
        population = self.sketch.n / self.r
        boundary = compute_boundary(model, np.arange(domain_size, dtype=np.uint64), self.theta, population)
        model.attach_boundary(boundary, self.theta)
        logger.debug(f"Trained model on {training.t} items from {self.sketch.n} reports, boundary P={boundary:.6g}")
        self.model = model
        return model

    def publish(self, model: Union[FrequencyModel, TableModel]):
        """Install an externally built model (it must already carry its boundary)."""
        if model.boundary is None:
            raise ContractError("a published model must carry its boundary P")
        self.model = model

    def begin_phase_two(self):
        """Reinitialize M to zeros and start aggregating phase-2 reports."""
        if self.model is None:
            raise ContractError("phase 2 needs a published frequency model")
        self.sketch.reset()
        self.sketch.theta = self.theta
        self.phase = 2

    def estimate_cms(self, d: int) -> float:
        """Apple-CMS estimate: the sketch estimator with no dummy correction."""
        return float(self.sketch.estimate_many([d], theta=0.0)[0])

    def estimate_many(self, keys) -> tuple[np.ndarray, np.ndarray]:
        """Estimates for many keys and a mask of those answered by the model."""
        if self.model is None:
            raise ContractError("LDPLCM estimation needs a published frequency model")
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        predictions = self.model.predict_many(keys)
        high = predictions >= self.model.boundary
        estimates = self.sketch.estimate_many(keys, theta=self.theta)
        return np.where(high, predictions, estimates), high

    def estimate_ldplcm(self, d: int) -> float:
        """Model prediction for high-frequent items, corrected sketch estimate otherwise."""
        estimates, _ = self.estimate_many([d])
        return float(estimates[0])


def variance_bound(
    n: int, m: int, k: int, theta: float, f_d: float, sum_sq_low: float, params: PrivacyParams
) -> float:
    """Upper bound on the variance of a low-frequent item's sketch estimate.

    ``n (c^2 - 1) / 4 + (n (1 - theta) - f(d)) / m + sum_sq_low / (k m)``
    """
    if min(n, m, k, f_d, sum_sq_low) < 0 or not 0 <= theta <= 1:
        raise ConfigError("variance bound inputs must be non-negative with theta in [0, 1]")
    c = params.c_epsilon
    return n * (c * c - 1.0) / 4.0 + (n * (1.0 - theta) - f_d) / m + sum_sq_low / (k * m)
