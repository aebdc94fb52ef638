"""Label-free failure detection of a classifier against a conditionally invariant proxy.

With no label shift, the target risk of any classifier ``h`` is bounded below by

    R_S(h) - 2 R_S(h_inv) + [P_T(h != h_inv) - P_S(h != h_inv)]

where ``h_inv`` is the (approximately) conditionally invariant proxy.  Every
term is computable from labeled source data and unlabeled target covariates.
Restricting both domains to a region where the proxy is confident gives a
tighter version of the same bound on that region.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyDataset, EmptyRegion
from .model import LinearModel, predict, predict_proba
from .numerics import quantile
from .scm import Dataset


@dataclass(frozen=True)
class DetectionReport:
    candidate_source_acc: float
    proxy_source_risk: float
    disagreement_source: float
    disagreement_target: float
    risk_lower_bound: float
    accuracy_upper_bound: float
    region_alpha: float | None = None
    region_fraction_target: float | None = None
    region_threshold: float | None = None
    actual_target_acc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def target_risk_lower_bound(candidate: LinearModel, proxy: LinearModel, source: Dataset,
                            target_x: np.ndarray, target_y: np.ndarray | None = None) -> DetectionReport:
    """Empirical target-risk lower bound; ``target_y`` is only used to report the actual accuracy."""
    target_x = np.asarray(target_x, dtype=np.float64)
    if len(source) == 0 or target_x.shape[0] == 0:
        raise EmptyDataset("detection needs non-empty source and target samples")
    cand_src = predict(candidate, source.x)
    prox_src = predict(proxy, source.x)
    cand_tgt = predict(candidate, target_x)
    prox_tgt = predict(proxy, target_x)

    cand_risk = float(np.mean(cand_src != source.y))
    proxy_risk = float(np.mean(prox_src != source.y))
    dis_src = float(np.mean(cand_src != prox_src))
    dis_tgt = float(np.mean(cand_tgt != prox_tgt))
    bound = cand_risk - 2.0 * proxy_risk + (dis_tgt - dis_src)
    actual = None if target_y is None else float(np.mean(cand_tgt == np.asarray(target_y)))
    return DetectionReport(1.0 - cand_risk, proxy_risk, dis_src, dis_tgt, bound, 1.0 - bound,
                           actual_target_acc=actual)


def confidence(proxy: LinearModel, x: np.ndarray) -> np.ndarray:
    """Maximum softmax probability of the proxy for each row."""
    return predict_proba(proxy, x).max(axis=1)


def restrict_region(proxy: LinearModel, source: Dataset, target_x: np.ndarray, alpha: float):
    """Keep rows whose proxy confidence reaches the alpha-quantile of target confidences.

    Returns ``(source_subset, target_mask, threshold)``.  ``alpha = 0`` is the
    whole input space: every row is kept on both sides, even source rows less
    confident than the least confident target row.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    target_x = np.asarray(target_x, dtype=np.float64)
    tgt_conf = confidence(proxy, target_x)
    threshold = quantile(tgt_conf, alpha)
    if alpha == 0.0:
        return source, np.ones(tgt_conf.shape[0], dtype=bool), threshold
    tgt_mask = tgt_conf >= threshold
    src_mask = confidence(proxy, source.x) >= threshold
    if not tgt_mask.any() or not src_mask.any():
        raise EmptyRegion(f"no {'source' if tgt_mask.any() else 'target'} rows reach confidence {threshold:.4f}")
    return source.subset(src_mask), tgt_mask, threshold


def restricted_bound(candidate: LinearModel, proxy: LinearModel, source: Dataset, target_x: np.ndarray,
                     alpha: float, target_y: np.ndarray | None = None) -> DetectionReport:
    """The lower bound with every quantity computed inside the proxy-confidence region."""
    target_x = np.asarray(target_x, dtype=np.float64)
    src_sub, tgt_mask, threshold = restrict_region(proxy, source, target_x, alpha)
    sub_y = None if target_y is None else np.asarray(target_y)[tgt_mask]
    report = target_risk_lower_bound(candidate, proxy, src_sub, target_x[tgt_mask], sub_y)
    return DetectionReport(**{
        **report.to_dict(),
        "region_alpha": float(alpha),
        "region_fraction_target": float(tgt_mask.mean()),
        "region_threshold": float(threshold),
    })
