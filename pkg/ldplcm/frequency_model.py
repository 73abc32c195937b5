"""The learned frequency model g and the frequency boundary P.

g is a squared-error gradient-boosted ensemble of regression trees over one
scalar feature, the item key cast to a float. Each stage is a scikit-learn
``DecisionTreeRegressor`` fitted to the current residuals; its node arrays are
copied into a ``RegressionTree`` so prediction and the JSON form do not
depend on scikit-learn internals.

``TableModel`` is a lookup-table predictor with the same interface, used as an
oracle when an experiment wants to isolate the estimator from model error.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Literal, Optional, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError
from sklearn.tree import DecisionTreeRegressor

from ldplcm.errors import ArtifactError, ConfigError, ContractError
from ldplcm.sketch import AggregateSketch

MODEL_FORMAT = "ldplcm-frequency-model"
MODEL_FORMAT_VERSION = 1
FEATURE_CODEC = "key-as-float"
_INF_TOKEN = "+inf"
# the tree learner works in float32; larger keys would share a feature value
MAX_FEATURE_KEY = 1 << 24

class BoostingParams(BaseModel):
    """Gradient boosting hyperparameters.

    Attributes:
        learning_rate: Shrinkage applied to every tree's output
        n_estimators: Number of boosting stages
        max_depth: Maximum depth of each regression tree
        min_samples_split: Smallest node that may still be split
    """

    learning_rate: float = Field(default=0.1, gt=0, le=1)
    n_estimators: int = Field(default=100, ge=0)
    max_depth: int = Field(default=3, ge=1)
    min_samples_split: int = Field(default=2, ge=2)

SMALL_DOMAIN_BOOSTING = BoostingParams(learning_rate=0.1, n_estimators=100, max_depth=3)
LARGE_DOMAIN_BOOSTING = BoostingParams(learning_rate=0.05, n_estimators=350, max_depth=5)

def item_features(keys) -> np.ndarray:
    """Feature codec: the item key as a double."""
    return np.atleast_1d(np.asarray(keys, dtype=np.uint64)).astype(np.float64)

@dataclass(frozen=True)
class TrainingSet:
    """Sampled domain items paired with their scaled phase-1 estimates."""

    keys: np.ndarray
    targets: np.ndarray

    @property
    def t(self) -> int:
        return int(self.keys.shape[0])

@dataclass(frozen=True)
class RegressionTree:
    """A binary regression tree stored as flat node arrays.

    Node 0 is the root. Internal nodes send ``x <= threshold`` left. Leaves have
    ``left == right == -1`` and a NaN threshold; ``value`` holds the mean
    residual of every node.
    """

    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.value.shape[0])

    @property
    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for node in range(self.node_count):
            if self.left[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return self.value[node]
            go_left = x <= self.threshold[node]
            child = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, child, node)

def grow_tree(x: np.ndarray, y: np.ndarray, max_depth: int, min_samples_split: int = 2) -> RegressionTree:
    """Fit one exact-greedy squared-error regression tree to ``y`` over features ``x``."""
    learner = DecisionTreeRegressor(
        criterion="squared_error", max_depth=max_depth, min_samples_split=min_samples_split, random_state=0
    )
    learner.fit(x.reshape(-1, 1), y)
    fitted = learner.tree_
    internal = fitted.children_left >= 0
    return RegressionTree(
        threshold=np.where(internal, fitted.threshold, math.nan).astype(np.float64),
        left=fitted.children_left.astype(np.int64),
        right=fitted.children_right.astype(np.int64),
        value=fitted.value[:, 0, 0].astype(np.float64),
    )

@dataclass
class FrequencyModel:
    """Boosted tree ensemble g plus the boundary P that publishes it.

    Prediction is ``base_prediction + learning_rate * sum(tree outputs)``. An
    item is high-frequent when ``g(d) >= P``; ``P = +inf`` means no item is.
    """

    trees: tuple[RegressionTree, ...]
    base_prediction: float
    learning_rate: float
    hyperparameters: BoostingParams = field(default_factory=BoostingParams)
    boundary: Optional[float] = None
    theta: Optional[float] = None
    feature_codec: str = FEATURE_CODEC

    kind = "gbdt"

    def predict_many(self, keys) -> np.ndarray:
        x = item_features(keys)
        total = np.zeros(x.shape[0], dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(x)
        return self.base_prediction + self.learning_rate * total

    def predict(self, d: int) -> float:
        return float(self.predict_many([d])[0])

    def staged_predict(self, keys) -> Iterator[np.ndarray]:
        """Predictions after each boosting stage, starting with the base prediction alone."""
        x = item_features(keys)
        total = np.zeros(x.shape[0], dtype=np.float64)
        yield self.base_prediction + self.learning_rate * total
        for tree in self.trees:
            total += tree.predict(x)
            yield self.base_prediction + self.learning_rate * total

    def attach_boundary(self, boundary: float, theta: float):
        self.boundary = float(boundary)
        self.theta = float(theta)

    def is_high_many(self, keys) -> np.ndarray:
        if self.boundary is None:
            raise ContractError("frequency boundary P has not been computed")
        return self.predict_many(keys) >= self.boundary

    def is_high(self, d: int) -> bool:
        return bool(self.is_high_many([d])[0])

@dataclass
class TableModel:
    """Predicts from a frequency table indexed by item key; keys past the table predict 0."""

    table: np.ndarray
    boundary: Optional[float] = None
    theta: Optional[float] = None

    kind = "table"

    @classmethod
    def oracle(cls, frequencies: np.ndarray, theta: float) -> "TableModel":
        """Table of exact frequencies with the boundary taken by the theta-prefix rule over them."""
        table = np.asarray(frequencies, dtype=np.float64)
        model = cls(table=table)
        model.attach_boundary(theta_boundary(table, np.arange(table.shape[0]), theta), theta)
        return model

    def predict_many(self, keys) -> np.ndarray:
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        out = np.zeros(keys.shape[0], dtype=np.float64)
        inside = keys < np.uint64(self.table.shape[0])
        out[inside] = self.table[keys[inside].astype(np.int64)]
        return out

    def predict(self, d: int) -> float:
        return float(self.predict_many([d])[0])

    def attach_boundary(self, boundary: float, theta: float):
        self.boundary = float(boundary)
        self.theta = float(theta)

    def is_high_many(self, keys) -> np.ndarray:
        if self.boundary is None:
            raise ContractError("frequency boundary P has not been computed")
        return self.predict_many(keys) >= self.boundary

    def is_high(self, d: int) -> bool:
        return bool(self.is_high_many([d])[0])

def build_training_set(
    sketch: AggregateSketch, domain_size: int, t: int, r: float, rng: np.random.Generator
) -> TrainingSet:
    """Sample t domain items and label them with phase-1 sketch estimates scaled by 1/r.

    Args:
        sketch: Phase-1 aggregate sketch
        domain_size: Number of items in the domain
        t: Number of items to sample; clamped to the domain size
        r: Phase-1 sampling rate
        rng: Sampler for the training items

    Returns:
        The training set, keys ascending
    """
    if not 0 < r <= 1:
        raise ConfigError(f"sampling rate r must be in (0, 1], got {r}")
    if t < 1 or domain_size < 1:
        raise ConfigError(f"need t >= 1 and a non-empty domain, got t={t}, domain_size={domain_size}")
    if t > domain_size:
        logger.warning(f"Training sample size t={t} exceeds the domain size; clamping to {domain_size}")
        t = domain_size
    keys = np.sort(rng.choice(domain_size, size=t, replace=False)).astype(np.uint64)
    targets = sketch.estimate_many(keys, theta=0.0) / r
    return TrainingSet(keys=keys, targets=targets)


def fit(train: TrainingSet, hyper: BoostingParams) -> FrequencyModel:
    """Squared-error gradient boosting with exact greedy splits.

    Each stage fits a tree to the current residuals and adds ``learning_rate``
    times its output. Constant targets give a model with no trees.
    """
    if train.t == 0:
        raise ContractError("cannot fit a frequency model on an empty training set")
    if int(np.max(train.keys)) >= MAX_FEATURE_KEY:
        raise ContractError(f"item keys must be below {MAX_FEATURE_KEY} to be told apart by the tree learner")
    x = item_features(train.keys)
    y = np.asarray(train.targets, dtype=np.float64)

    base = float(y.mean())
    if np.all(y == y[0]):
        logger.debug("Training targets are constant; fitted a tree-less model")
        return FrequencyModel(trees=(), base_prediction=base, learning_rate=hyper.learning_rate, hyperparameters=hyper)

    trees = []
    prediction = np.full(y.shape[0], base)
    for _ in range(hyper.n_estimators):
        tree = grow_tree(x, y - prediction, hyper.max_depth, hyper.min_samples_split)
        prediction += hyper.learning_rate * tree.predict(x)
        trees.append(tree)
    logger.debug(
        f"Fitted {len(trees)} trees on {train.t} items, training MSE {float(np.mean((y - prediction) ** 2)):.6g}"
    )
    return FrequencyModel(
        trees=tuple(trees), base_prediction=base, learning_rate=hyper.learning_rate, hyperparameters=hyper
    )


def theta_boundary(values: np.ndarray, keys: np.ndarray, theta: float, total: Optional[float] = None) -> float:
    """Boundary P from the theta-prefix rule.

    Values are sorted descending with ties broken by ascending key and summed
    until the running sum first exceeds ``theta * total``; P is the last value
    before that crossing. ``total`` defaults to the sum of ``values``.

    Returns ``+inf`` (no item is high-frequent) when the total is not positive
    or the largest value alone exceeds the limit. P is never a non-positive
    value: if the prefix runs into those, the smallest positive value in it is used.
    """
    if not 0 < theta <= 1:
        raise ConfigError(f"theta must be in (0, 1], got {theta}")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ContractError("boundary needs at least one probe item")
    ordered = values[np.lexsort((np.asarray(keys), -values))]
    prefix = np.cumsum(ordered)
    total = float(prefix[-1]) if total is None else float(total)
    if not total > 0:
        return math.inf
    crossed = np.flatnonzero(prefix > theta * total)
    last = (int(crossed[0]) if crossed.shape[0] else ordered.shape[0]) - 1
    if last < 0:
        return math.inf
    positive = ordered[: last + 1][ordered[: last + 1] > 0]
    return float(positive[-1]) if positive.shape[0] else math.inf


def compute_boundary(model, probe_items, theta: float, total: Optional[float] = None) -> float:
    """Boundary P over the model's predictions for ``probe_items``; see ``theta_boundary``."""
    probe_items = np.atleast_1d(np.asarray(probe_items, dtype=np.uint64))
    return theta_boundary(model.predict_many(probe_items), probe_items, theta, total)


class TreeNodeDocument(BaseModel):
    """One tree node; leaves carry only ``value``."""

    value: float
    threshold: Optional[float] = None
    left: Optional["TreeNodeDocument"] = None
    right: Optional["TreeNodeDocument"] = None

TreeNodeDocument.model_rebuild()

class SketchBinding(BaseModel):
    """Parameters of the sketch a model was published alongside."""

    k: int
    m: int
    epsilon: float
    master_seed: int

class ModelDocument(BaseModel):
    """On-disk form of a published frequency model."""

    format: Literal["ldplcm-frequency-model"] = MODEL_FORMAT
    version: int = MODEL_FORMAT_VERSION
    kind: Literal["gbdt", "table"] = "gbdt"
    feature_codec: str = FEATURE_CODEC
    hyperparameters: Optional[BoostingParams] = None
    base_prediction: float = 0.0
    learning_rate: float = 0.0
    theta: Optional[float] = None
    boundary: Optional[Union[float, Literal["+inf"]]] = None
    sketch: Optional[SketchBinding] = None
    config: Optional[dict[str, Any]] = None
    trees: list[TreeNodeDocument] = Field(default_factory=list)
    table: Optional[list[float]] = None

def _tree_to_document(tree: RegressionTree, node: int = 0) -> TreeNodeDocument:
    if tree.left[node] < 0:
        return TreeNodeDocument(value=float(tree.value[node]))
    return TreeNodeDocument(
        value=float(tree.value[node]),
        threshold=float(tree.threshold[node]),
        left=_tree_to_document(tree, int(tree.left[node])),
        right=_tree_to_document(tree, int(tree.right[node])),
    )

def _tree_from_document(root: TreeNodeDocument) -> RegressionTree:
    threshold, left, right, value = [], [], [], []

    def visit(doc: TreeNodeDocument) -> int:
        node = len(value)
        threshold.append(math.nan if doc.threshold is None else doc.threshold)
        left.append(-1)
        right.append(-1)
        value.append(doc.value)
        if doc.threshold is not None:
            if doc.left is None or doc.right is None:
                raise ArtifactError("internal tree node is missing a child")
            left[node] = visit(doc.left)
            right[node] = visit(doc.right)
        return node

    visit(root)
    return RegressionTree(
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
    )

def serialize(
    model: Union[FrequencyModel, TableModel],
    binding: Optional[SketchBinding] = None,
    config: Optional[dict[str, Any]] = None,
) -> bytes:
    """Render a model as a versioned JSON document; floats use shortest round-trip repr."""
    boundary = model.boundary
    if boundary is not None and math.isinf(boundary):
        boundary = _INF_TOKEN
    if isinstance(model, TableModel):
        document = ModelDocument(
            kind="table",
            theta=model.theta,
            boundary=boundary,
            sketch=binding,
            config=config,
            table=[float(v) for v in model.table],
        )
    else:
        document = ModelDocument(
            kind="gbdt",
            feature_codec=model.feature_codec,
            hyperparameters=model.hyperparameters,
            base_prediction=model.base_prediction,
            learning_rate=model.learning_rate,
            theta=model.theta,
            boundary=boundary,
            sketch=binding,
            config=config,
            trees=[_tree_to_document(tree) for tree in model.trees],
        )
    payload = document.model_dump(mode="python", exclude_none=True)
    return json.dumps(payload, separators=(",", ":"), allow_nan=False).encode("utf-8")

def deserialize(data: bytes) -> tuple[Union[FrequencyModel, TableModel], ModelDocument]:
    """Parse a model document written by ``serialize``.

    Raises:
        ArtifactError: On truncation, malformed content, or an unsupported version
    """
    try:
        raw = json.loads(data)
    except ValueError as e:
        raise ArtifactError(f"model file is not valid JSON (truncated?): {e}") from e
    if not isinstance(raw, dict) or raw.get("format") != MODEL_FORMAT:
        raise ArtifactError("not an ldplcm frequency model document")
    if raw.get("version") != MODEL_FORMAT_VERSION:
        raise ArtifactError(f"unsupported model format version {raw.get('version')}")
    try:
        document = ModelDocument.model_validate(raw)
    except ValidationError as e:
        raise ArtifactError(f"malformed model document: {e}") from e

    boundary = math.inf if document.boundary == _INF_TOKEN else document.boundary
    if document.kind == "table":
        model = TableModel(
            table=np.array(document.table or [], dtype=np.float64), boundary=boundary, theta=document.theta
        )
        return model, document
    if document.feature_codec != FEATURE_CODEC:
        raise ArtifactError(f"unknown feature codec {document.feature_codec!r}")
    model = FrequencyModel(
        trees=tuple(_tree_from_document(root) for root in document.trees),
        base_prediction=document.base_prediction,
        learning_rate=document.learning_rate,
        hyperparameters=document.hyperparameters or BoostingParams(),
        boundary=boundary,
        theta=document.theta,
        feature_codec=document.feature_codec,
    )
    return model, document
