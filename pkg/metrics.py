"""ROC AUC in its rank-probability (Mann-Whitney) form, ties counting one half."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class SingleClass(ValueError):
    """AUC is undefined without at least one positive and one negative."""


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Probability that a uniformly drawn positive scores above a uniformly
    drawn negative; tied pairs count 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positive / {n_neg} negative")

    ranks = pd.Series(scores).rank(method="average").to_numpy()
    u = float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_or_nan(scores: Sequence[float], labels: Sequence[float]) -> float:
    """roc_auc over the labelled entries only (NaN = missing); NaN when single-class."""
    labels = np.asarray(labels, dtype=np.float64)
    keep = ~np.isnan(labels)
    try:
        return roc_auc(np.asarray(scores)[keep], labels[keep].astype(int))
    except SingleClass:
        return float("nan")
