"""Linear softmax classifier, its cross-entropy surrogate and an Adam optimizer.

The feature map and the classification head are one affine layer producing
``L`` class scores; matching penalties act on that score vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .numerics import Rng, log_softmax, softmax


@dataclass(frozen=True)
class LinearModel:
    a: np.ndarray  # (L, p)
    b: np.ndarray  # (L,)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if a.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeMismatch(f"weight shape {a.shape} does not match bias length {b.shape[0]}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def classes(self) -> int:
        return self.a.shape[0]

    @property
    def dimension(self) -> int:
        return self.a.shape[1]

    @classmethod
    def init(cls, rng: Rng, p: int, classes: int, sd: float = 0.01) -> "LinearModel":
        a = sd * rng.standard_normal((classes, p))
        b = sd * rng.standard_normal(classes)
        return cls(a, b)

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "p": self.dimension, "L": self.classes}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        model = cls(np.array(d["a"], dtype=np.float64), np.array(d["b"], dtype=np.float64))
        if ("p" in d and d["p"] != model.dimension) or ("L" in d and d["L"] != model.classes):
            raise ShapeMismatch("stored p/L disagree with the parameter arrays")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LinearModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scores(model: LinearModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dimension:
        raise ShapeMismatch(f"expected inputs with {model.dimension} columns, got shape {x.shape}")
    return x @ model.a.T + model.b


def predict(model: LinearModel, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smaller class
    return np.argmax(scores(model, x), axis=1)


def predict_proba(model: LinearModel, x: np.ndarray) -> np.ndarray:
    return softmax(scores(model, x))


def cross_entropy_from_scores(s: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean weighted cross-entropy of score rows and its gradient w.r.t. the scores.

    The mean divides by the row count, not by the weight total.
    """
    n = s.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(s)
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    logp = log_softmax(s)
    rows = np.arange(n)
    loss = float(-(w * logp[rows, y]).sum() / n)
    g = np.exp(logp)
    g[rows, y] -= 1.0
    g *= (w / n)[:, None]
    return loss, g


def backprop_scores(x: np.ndarray, g_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain a score gradient through ``s = x a^T + b``."""
    return g_scores.T @ x, g_scores.sum(axis=0)


def weighted_cross_entropy_and_grad(model: LinearModel, x: np.ndarray, y: np.ndarray,
                                    sample_weights: np.ndarray | None = None):
    """Return ``(loss, (grad_a, grad_b))`` for the weighted mean cross-entropy."""
    s = scores(model, x)
    y = np.asarray(y, dtype=np.int64)
    if y.shape[0] != s.shape[0]:
        raise ShapeMismatch("labels and inputs differ in length")
    if sample_weights is not None:
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != y.shape:
            raise ShapeMismatch("sample_weights must have one entry per row")
        if np.any(sample_weights < 0):
            raise ValueError("sample weights must be non-negative")
    loss, g = cross_entropy_from_scores(s, y, sample_weights)
    return loss, backprop_scores(np.asarray(x, dtype=np.float64), g)


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(state: AdamState, model: LinearModel, grads) -> tuple[LinearModel, AdamState]:
    """One bias-corrected Adam update; returns a new model and a new state."""
    params = (model.a, model.b)
    grads = tuple(np.asarray(g, dtype=np.float64) for g in grads)
    if len(grads) != 2 or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeMismatch("gradient shapes do not match the model")
    m_prev = state.first_moment or [np.zeros_like(p) for p in params]
    v_prev = state.second_moment or [np.zeros_like(p) for p in params]
    t = state.step + 1
    m_new = [state.beta1 * m + (1 - state.beta1) * g for m, g in zip(m_prev, grads)]
    v_new = [state.beta2 * v + (1 - state.beta2) * g * g for v, g in zip(v_prev, grads)]
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    updated = [
        p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        for p, m, v in zip(params, m_new, v_new)
    ]
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m_new, v_new)
    return LinearModel(*updated), new_state


def zero_one_risk(model: LinearModel, dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.x) != dataset.y))


def accuracy(model: LinearModel, dataset) -> float:
    return 1.0 - zero_one_risk(model, dataset)


def weighted_zero_one_risk(model: LinearModel, dataset, w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("class weights must be non-negative")
    if len(dataset) == 0:
        return 0.0
    wrong = predict(model, dataset.x) != dataset.y
    return float(np.sum(w[dataset.y] * wrong) / len(dataset))


def cross_entropy_risk(model: LinearModel, dataset, w: np.ndarray | None = None) -> float:
    sample_w = None if w is None else np.asarray(w, dtype=np.float64)[dataset.y]
    return cross_entropy_from_scores(scores(model, dataset.x), dataset.y, sample_w)[0]


@dataclass(frozen=True)
class ImportanceWeights:
    per_domain: tuple[np.ndarray, ...]

    def __post_init__(self):
        vecs = tuple(np.asarray(v, dtype=np.float64) for v in self.per_domain)
        for v in vecs:
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError("importance weights must be finite and non-negative")
        object.__setattr__(self, "per_domain", vecs)

    def to_dict(self) -> dict:
        return {str(m): v.tolist() for m, v in enumerate(self.per_domain, start=1)}
