"""Label-ratio estimation from a proxy classifier's confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyDataset, ShapeMismatch, SingularConfusion, SingularMatrix
from .model import ImportanceWeights, LinearModel, predict
from .numerics import solve_linear_system


@dataclass(frozen=True)
class ConfusionMatrix:
    c: np.ndarray  # c[i, j] = P(prediction = i, label = j)
    n: int

    @property
    def label_marginal(self) -> np.ndarray:
        return self.c.sum(axis=0)

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.c))


def confusion_matrix(model: LinearModel, dataset) -> ConfusionMatrix:
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("confusion matrix of an empty dataset")
    L = model.classes
    c = np.zeros((L, L))
    np.add.at(c, (predict(model, dataset.x), dataset.y), 1.0)
    return ConfusionMatrix(c / n, n)


def predicted_target_distribution(model: LinearModel, target_x: np.ndarray) -> np.ndarray:
    target_x = np.asarray(target_x)
    if target_x.shape[0] == 0:
        raise EmptyDataset("no target rows")
    return np.bincount(predict(model, target_x), minlength=model.classes) / target_x.shape[0]


def estimate_weights(conf: ConfusionMatrix, mu: np.ndarray) -> np.ndarray:
    """Solve ``C w = mu``, clip negatives, and rescale to unit weighted source label mass."""
    c = np.asarray(conf.c, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or mu.shape != (c.shape[0],):
        raise ShapeMismatch("confusion matrix must be square and match mu")
    try:
        raw = solve_linear_system(c, mu)
    except SingularMatrix as exc:
        raise SingularConfusion(f"proxy confusion matrix is singular: {exc}") from exc
    w = np.clip(raw, 0.0, None)
    mass = float(w @ c.sum(axis=0))
    if not mass > 0.0 or not np.all(np.isfinite(w)):
        raise SingularConfusion("estimated weights vanish on every source label")
    return w / mass


def estimate_domain_weights(proxy: LinearModel, sources: Sequence, target_x: np.ndarray) -> ImportanceWeights:
    """One weight vector per source domain, all against the same target covariates."""
    mu = predicted_target_distribution(proxy, target_x)
    return ImportanceWeights(tuple(estimate_weights(confusion_matrix(proxy, ds), mu) for ds in sources))


def true_weights(source_probs: np.ndarray, target_probs: np.ndarray) -> np.ndarray:
    return np.asarray(target_probs, dtype=np.float64) / np.asarray(source_probs, dtype=np.float64)
