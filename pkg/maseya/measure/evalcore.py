"""
Prediction models and held-out metrics shared by every validation stage.

The binary model is an L2-penalized logistic regression and the continuous
model is ridge regression; both are deterministic given their inputs.
"""

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Mapping

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression, Ridge
from sklearn.metrics import log_loss, mean_squared_error, r2_score, roc_auc_score

from .errors import (
    EmptyInput,
    NonConvergence,
    PreconditionError,
    SingleClassTrain,
    UndefinedMetric,
    ZeroVarianceTarget,
)

LOGGER = logging.getLogger(__name__)

LOGLOSS_CLIP = 1e-12


class Task(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Orientation(str, Enum):
    HIGHER_BETTER = "higher_better"
    LOWER_BETTER = "lower_better"


@dataclass(frozen=True)
class ModelSpec:
    task: Task
    l2: float = 1e-6
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if self.l2 < 0:
            raise PreconditionError(f"regularization must be nonnegative, got {self.l2}")
        if self.tol <= 0:
            raise PreconditionError(f"tolerance must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise PreconditionError(f"max_iter must be positive, got {self.max_iter}")


def _check_design(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if np.isnan(x).any():
        raise PreconditionError(f"{name} holds missing cells; drop those rows first")
    return x


def fit_predict(
    x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, spec: ModelSpec
) -> np.ndarray:
    """
    Fit on the training design and predict the test design.

    Binary tasks return positive-class probabilities. A design with no columns
    predicts the training mean.
    """
    x_train = _check_design(x_train, "training design")
    x_test = _check_design(x_test, "test design")
    y_train = np.asarray(y_train, dtype=float)
    if x_train.shape[0] != y_train.shape[0]:
        raise PreconditionError("training design and targets differ in length")
    if x_train.shape[0] == 0:
        raise EmptyInput("cannot fit a model on zero rows")
    if np.isnan(y_train).any():
        raise PreconditionError("training targets hold missing values")

    if spec.task == Task.BINARY:
        classes = np.unique(y_train)
        if not np.isin(classes, (0.0, 1.0)).all():
            raise PreconditionError("binary targets must be 0 or 1")
        if classes.size < 2:
            raise SingleClassTrain("binary training targets hold one class", n=y_train.size)

    if x_train.shape[1] == 0:
        return np.full(x_test.shape[0], float(np.mean(y_train)))

    if spec.task == Task.BINARY:
        if spec.l2 > 0:
            model = LogisticRegression(C=1.0 / spec.l2, max_iter=spec.max_iter, tol=spec.tol)
        else:
            model = LogisticRegression(penalty=None, max_iter=spec.max_iter, tol=spec.tol)
        model.fit(x_train, y_train.astype(int))
        if int(np.max(model.n_iter_)) >= spec.max_iter:
            LOGGER.warning("Logistic fit stopped at %d iterations", spec.max_iter)
            warnings.warn(
                f"logistic fit stopped at {spec.max_iter} iterations; using the last iterate",
                NonConvergence,
                stacklevel=2,
            )
        return model.predict_proba(x_test)[:, 1]

    model = Ridge(alpha=spec.l2) if spec.l2 > 0 else LinearRegression()
    model.fit(x_train, y_train)
    return model.predict(x_test)


def _check_pair(predictions, targets):
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.size == 0:
        raise EmptyInput("metric needs at least one row")
    if predictions.shape != targets.shape:
        raise PreconditionError("predictions and targets differ in shape")
    return predictions, targets


def _check_labels(labels: np.ndarray):
    if not np.isin(labels, (0.0, 1.0)).all():
        raise PreconditionError("labels must be 0 or 1")


def auc(probs, labels) -> float:
    """Rank AUC with half credit for ties; NaN when only one class is present."""
    probs, labels = _check_pair(probs, labels)
    _check_labels(labels)
    if np.unique(labels).size < 2:
        warnings.warn("AUC is undefined for a single class", UndefinedMetric, stacklevel=2)
        return float("nan")
    return float(roc_auc_score(labels, probs))


def logloss(probs, labels) -> float:
    probs, labels = _check_pair(probs, labels)
    _check_labels(labels)
    clipped = np.clip(probs, LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    return float(log_loss(labels, clipped, labels=[0, 1]))


def r2(preds, targets) -> float:
    """1 - SSE/SST; NaN with a warning when targets are constant."""
    preds, targets = _check_pair(preds, targets)
    if np.all(targets == targets[0]):
        warnings.warn("R-squared is undefined for constant targets", ZeroVarianceTarget, stacklevel=2)
        return float("nan")
    return float(r2_score(targets, preds))


def rmse(preds, targets) -> float:
    preds, targets = _check_pair(preds, targets)
    return float(np.sqrt(mean_squared_error(targets, preds)))


@dataclass(frozen=True)
class MetricSpec:
    name: str
    orientation: Orientation
    task: Task
    function: Callable[[np.ndarray, np.ndarray], float]

    def __call__(self, predictions, targets) -> float:
        return self.function(predictions, targets)

    def orient(self, delta):
        """Flip lower-better deltas so positive always means improvement."""
        if self.orientation == Orientation.LOWER_BETTER:
            return -delta
        return delta


METRICS: Mapping[str, MetricSpec] = {
    "auc": MetricSpec("auc", Orientation.HIGHER_BETTER, Task.BINARY, auc),
    "logloss": MetricSpec("logloss", Orientation.LOWER_BETTER, Task.BINARY, logloss),
    "r2": MetricSpec("r2", Orientation.HIGHER_BETTER, Task.CONTINUOUS, r2),
    "rmse": MetricSpec("rmse", Orientation.LOWER_BETTER, Task.CONTINUOUS, rmse),
}


def get_metric(name: str) -> MetricSpec:
    try:
        return METRICS[name]
    except KeyError:
        raise PreconditionError(f"unknown metric {name!r}") from None


def metrics_for(task: Task) -> List[MetricSpec]:
    return [metric for metric in METRICS.values() if metric.task == task]
