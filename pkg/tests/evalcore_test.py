"""Tests for model fitting and metrics."""

import warnings
from itertools import product

import numpy as np
import pytest

from maseya.measure.errors import NonConvergence, PreconditionError, SingleClassTrain, UndefinedMetric
from maseya.measure.evalcore import (
    ModelSpec,
    Orientation,
    Task,
    auc,
    fit_predict,
    get_metric,
    logloss,
    metrics_for,
    r2,
    rmse,
)


def _brute_auc(probs, labels):
    """Share of positive and negative pairs ranked correctly, ties counting half."""
    positives = [p for p, y in zip(probs, labels) if y == 1]
    negatives = [p for p, y in zip(probs, labels) if y == 0]
    total = 0.0
    for pos, neg in product(positives, negatives):
        total += 1.0 if pos > neg else 0.5 if pos == neg else 0.0
    return total / (len(positives) * len(negatives))


def test_auc_matches_pair_count():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=60)
    probs = np.round(rng.random(60), 1)
    assert auc(probs, labels) == pytest.approx(_brute_auc(probs, labels))


def test_auc_single_class_is_undefined():
    with pytest.warns(UndefinedMetric):
        assert np.isnan(auc([0.2, 0.4], [1, 1]))


def test_logloss_value():
    assert logloss([0.25, 0.75], [0, 1]) == pytest.approx(0.287682, abs=1e-6)


def test_logloss_clips_extremes():
    assert np.isfinite(logloss([0.0, 1.0], [1, 0]))


def test_r2_and_rmse():
    targets = np.array([1.0, 2.0, 3.0, 4.0])
    assert r2(targets, targets) == pytest.approx(1.0)
    assert r2(np.full(4, 2.5), targets) == pytest.approx(0.0)
    assert rmse(targets + 1.0, targets) == pytest.approx(1.0)
    with pytest.warns(Warning):
        assert np.isnan(r2([1.0, 2.0], [3.0, 3.0]))


def test_metric_orientation():
    """Lower-better metrics flip sign so positive deltas mean improvement."""
    assert get_metric("logloss").orientation == Orientation.LOWER_BETTER
    assert get_metric("logloss").orient(-0.1) == pytest.approx(0.1)
    assert get_metric("auc").orient(0.1) == pytest.approx(0.1)
    assert [m.name for m in metrics_for(Task.BINARY)] == ["auc", "logloss"]
    assert [m.name for m in metrics_for(Task.CONTINUOUS)] == ["r2", "rmse"]
    with pytest.raises(PreconditionError):
        get_metric("accuracy")


def test_logistic_fit_separates_signal():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(400, 1))
    y = (x[:, 0] + 0.3 * rng.normal(size=400) > 0).astype(int)
    probs = fit_predict(x[:300], y[:300], x[300:], ModelSpec(Task.BINARY))
    assert probs.shape == (100,)
    assert ((probs >= 0) & (probs <= 1)).all()
    assert auc(probs, y[300:]) > 0.9


def test_linear_fit_recovers_slope():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 1))
    y = 2.0 * x[:, 0] + 1.0
    preds = fit_predict(x, y, np.array([[0.0], [1.0]]), ModelSpec(Task.CONTINUOUS))
    assert preds == pytest.approx([1.0, 3.0], abs=1e-3)


def test_empty_design_predicts_mean():
    preds = fit_predict(np.empty((4, 0)), np.array([0.0, 1.0, 1.0, 1.0]), np.empty((2, 0)), ModelSpec(Task.BINARY))
    assert preds.tolist() == [0.75, 0.75]


def test_single_class_training():
    with pytest.raises(SingleClassTrain):
        fit_predict(np.ones((3, 1)), np.ones(3), np.ones((1, 1)), ModelSpec(Task.BINARY))


def test_missing_design_cells():
    x = np.array([[1.0], [np.nan]])
    with pytest.raises(PreconditionError):
        fit_predict(x, np.array([0.0, 1.0]), x, ModelSpec(Task.BINARY))


def test_iteration_cap_warns():
    """Hitting the iteration cap warns and still returns predictions."""
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 5)) * 100
    y = (x[:, 0] > 0).astype(int)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        probs = fit_predict(x, y, x, ModelSpec(Task.BINARY, l2=0.0, max_iter=1))
    assert probs.shape == (200,)
    assert any(issubclass(w.category, NonConvergence) for w in caught)


def test_model_spec_bounds():
    with pytest.raises(PreconditionError):
        ModelSpec(Task.BINARY, l2=-1.0)
    with pytest.raises(PreconditionError):
        ModelSpec(Task.BINARY, max_iter=0)
