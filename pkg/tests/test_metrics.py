import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from metrics import SingleClass, auc_or_nan, roc_auc


@pytest.mark.parametrize("scores, labels, expected", [
    ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.75),
    ([0.9, 0.8, 0.1], [1, 1, 0], 1.0),
    ([0.1, 0.8, 0.9], [1, 0, 0], 0.0),
    ([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1], 0.5),
])
def test_roc_auc_examples(scores, labels, expected):
    assert roc_auc(scores, labels) == pytest.approx(expected)


def test_ties_count_one_half():
    # one positive tied with one of two negatives, above the other
    assert roc_auc([0.5, 0.5, 0.2], [1, 0, 0]) == pytest.approx(0.75)


def test_agrees_with_sklearn_on_random_data():
    rng = np.random.default_rng(0)
    for _ in range(20):
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(50), 1)
        assert roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))


def test_single_class_is_an_error():
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1])


def test_auc_or_nan_skips_missing_labels():
    assert auc_or_nan([0.9, 0.1, 0.7, 0.2], [1, 0, np.nan, np.nan]) == pytest.approx(1.0)
    assert math.isnan(auc_or_nan([0.9, 0.1], [1, np.nan]))
