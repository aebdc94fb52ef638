"""Distribution-matching penalties on feature batches, with exact gradients.

Every penalty returns its value together with the gradient with respect to
the feature rows of each batch it received.  Sample weights (for importance
weighting) are normalized to sum to one inside each batch and are treated as
constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyBatch, ShapeMismatch
from .numerics import median_pair_indices, pairwise_sq_distances

KINDS = ("mean", "mmd")


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "mean"
    bandwidth: float | None = None  # fixed Gaussian sigma; None selects the median heuristic
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"penalty kind must be one of {KINDS}, got {self.kind!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("penalty strength must be finite and non-negative")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass(frozen=True)
class FeatureBatch:
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", v)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != v.shape[0]:
                raise ShapeMismatch("one weight per feature row is required")
            if np.any(w < 0) or (w.size and not np.any(w > 0)):
                raise ValueError("weights must be non-negative with at least one positive entry")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.values.shape[0]

    def normalized_weights(self) -> np.ndarray:
        n = len(self)
        if self.weights is None:
            return np.full(n, 1.0 / n)
        return self.weights / self.weights.sum()


def _check_pair(src: FeatureBatch, tgt: FeatureBatch) -> None:
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyBatch("both feature batches must be non-empty")
    if src.values.shape[1] != tgt.values.shape[1]:
        raise ShapeMismatch("feature batches differ in width")


def mean_penalty(src: FeatureBatch, tgt: FeatureBatch):
    """Squared Euclidean distance between weighted feature means."""
    _check_pair(src, tgt)
    ws, wt = src.normalized_weights(), tgt.normalized_weights()
    diff = ws @ src.values - wt @ tgt.values
    value = float(diff @ diff)
    return value, 2.0 * ws[:, None] * diff, -2.0 * wt[:, None] * diff


def mmd_penalty(src: FeatureBatch, tgt: FeatureBatch, spec: PenaltySpec | None = None):
    """Weighted biased squared MMD with a Gaussian kernel.

    ``k(u, v) = exp(-|u - v|^2 / (2 sigma^2))``.  With the median heuristic,
    ``sigma^2`` is the median squared distance between distinct pooled rows,
    and the gradient includes the dependence of that median on the features.
    """
    _check_pair(src, tgt)
    spec = spec or PenaltySpec(kind="mmd")
    n = len(src)
    z = np.vstack([src.values, tgt.values])
    c = np.concatenate([src.normalized_weights(), -tgt.normalized_weights()])
    d = pairwise_sq_distances(z)

    median_pairs = []
    if spec.bandwidth is not None:
        sigma2 = float(spec.bandwidth) ** 2
    elif z.shape[0] < 2:
        sigma2 = 1.0
    else:
        sigma2, median_pairs = median_pair_indices(d)
        if sigma2 <= 0.0:
            sigma2, median_pairs = 1.0, []

    k = np.exp(-d / (2.0 * sigma2))
    kc = k @ c
    value = float(c @ kc)
    grad = -(2.0 / sigma2) * c[:, None] * (kc[:, None] * z - k @ (c[:, None] * z))
    if median_pairs:
        beta = float(c @ ((k * d) @ c)) / (2.0 * sigma2 * sigma2)
        for i, j, share in median_pairs:
            step = 2.0 * share * beta * (z[i] - z[j])
            grad[i] += step
            grad[j] -= step
    return value, grad[:n], grad[n:]


def distance(src: FeatureBatch, tgt: FeatureBatch, spec: PenaltySpec):
    if spec.kind == "mean":
        return mean_penalty(src, tgt)
    return mmd_penalty(src, tgt, spec)


def dip_penalty(src: FeatureBatch, tgt: FeatureBatch, spec: PenaltySpec):
    """Distance between source and target marginal feature distributions."""
    return distance(src, tgt, spec)


def joint_dip_penalty(src_feat: FeatureBatch, tgt_feat: FeatureBatch,
                      src_cic: FeatureBatch, tgt_cic: FeatureBatch, spec: PenaltySpec | None = None):
    """MMD between the joint laws of (features, frozen CIC features).

    Gradients are returned for the trainable feature columns only.
    """
    if len(src_feat) != len(src_cic) or len(tgt_feat) != len(tgt_cic):
        raise ShapeMismatch("feature and CIC batches must have matching row counts")
    q = src_feat.values.shape[1]
    src = FeatureBatch(np.hstack([src_feat.values, src_cic.values]), src_feat.weights)
    tgt = FeatureBatch(np.hstack([tgt_feat.values, tgt_cic.values]), tgt_feat.weights)
    mmd_spec = PenaltySpec("mmd", spec.bandwidth if spec else None, spec.lam if spec else 1.0)
    value, gs, gt = mmd_penalty(src, tgt, mmd_spec)
    return value, gs[:, :q], gt[:, :q]


def cip_penalty(domains: Sequence[Sequence[FeatureBatch]], spec: PenaltySpec):
    """Conditional invariance penalty across source domains.

    ``domains[m][y]`` holds the class-``y`` features of domain ``m``.  The value
    is ``1/(L M^2)`` times the sum over labels and ordered domain pairs
    ``m != m'`` of the base distance.  Class batches with fewer than two rows
    are left out of every pair they would enter.
    """
    num_domains = len(domains)
    if num_domains < 2:
        raise ValueError("the conditional penalty needs at least two domains")
    num_labels = len(domains[0])
    scale = 1.0 / (num_labels * num_domains ** 2)
    grads = [[np.zeros_like(b.values) for b in per_label] for per_label in domains]
    total = 0.0
    for y in range(num_labels):
        live = [m for m in range(num_domains) if len(domains[m][y]) >= 2]
        if len(live) < 2:
            continue
        if spec.kind == "mean":
            total += _cip_mean_closed_form(domains, y, live, scale, grads)
            continue
        for i, m in enumerate(live):
            for m2 in live[i + 1:]:
                value, g1, g2 = mmd_penalty(domains[m][y], domains[m2][y], spec)
                # MMD is symmetric, so the ordered pair (m2, m) doubles the term
                total += 2.0 * scale * value
                grads[m][y] += 2.0 * scale * g1
                grads[m2][y] += 2.0 * scale * g2
    return total, grads


def _cip_mean_closed_form(domains, y, live, scale, grads) -> float:
    # sum over ordered pairs of |mu_m - mu_m'|^2 equals 2k * sum_m |mu_m - mu_bar|^2
    weights = [domains[m][y].normalized_weights() for m in live]
    mus = np.vstack([w @ domains[m][y].values for w, m in zip(weights, live)])
    k = len(live)
    centered = mus - mus.mean(axis=0)
    value = 2.0 * k * float(np.sum(centered * centered))
    for w, m, dev in zip(weights, live, centered):
        grads[m][y] += scale * 4.0 * k * w[:, None] * dev
    return scale * value
