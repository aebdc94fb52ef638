"""Training objectives for the domain-adaptation methods and their multi-stage pipelines.

All methods train the same :class:`~cicda.model.LinearModel` with Adam on
mini-batches.  One step draws a batch from every domain the objective
touches (and from the target covariates when it matches distributions);
each domain is reshuffled at every epoch.

Staged methods follow the same order everywhere: fit the proxy (CIP, or
ERM-Pool for IW-ERM), freeze it, estimate label-ratio weights from it, then
fit a fresh model on the final objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateClass, ShapeMismatch
from .label_shift import estimate_domain_weights
from .model import (
    AdamState,
    ImportanceWeights,
    LinearModel,
    accuracy,
    adam_step,
    backprop_scores,
    cross_entropy_from_scores,
    cross_entropy_risk,
    scores,
)
from .numerics import make_rng, softmax
from .penalties import FeatureBatch, PenaltySpec, cip_penalty, dip_penalty, joint_dip_penalty
from .scm import Dataset, ScenarioSpec

METHODS = (
    "Tar", "ERM", "ERM-Pool", "DIP", "DIP-Pool", "CIP", "IW-ERM", "IW-CIP", "IW-DIP",
    "JointDIP", "JointDIP-Pool", "IW-JointDIP", "IRM", "V-REx", "groupDRO",
)
SINGLE_SOURCE = ("ERM", "DIP", "IW-DIP", "JointDIP", "IW-JointDIP")
USES_CIP_PROXY = ("IW-CIP", "IW-DIP", "JointDIP", "JointDIP-Pool", "IW-JointDIP")
IMPORTANCE_WEIGHTED = ("IW-ERM", "IW-CIP", "IW-DIP", "IW-JointDIP")
JOINT = ("JointDIP", "JointDIP-Pool", "IW-JointDIP")
VALIDATION_FRACTION = 0.1


@dataclass(frozen=True)
class MethodSpec:
    """Which objective to train and with which strengths.

    ``penalty.lam`` is the method's own strength (DIP, CIP, JointDIP, IRM or
    V-REx lambda).  ``lambda_cip``/``cip_kind`` configure the frozen CIP proxy
    of the staged methods.
    """
    method: str
    penalty: PenaltySpec = PenaltySpec("mean", lam=1.0)
    lambda_cip: float = 1.0
    cip_kind: str = "mean"
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-2
    groupdro_eta: float = 0.1
    split: bool = False  # staged methods: proxy, weights and final fit on disjoint thirds of each source

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lambda_cip < 0 or self.groupdro_eta < 0:
            raise ConfigError("lambda_cip and groupdro_eta must be non-negative")
        if self.method in JOINT and self.penalty.kind != "mmd":
            object.__setattr__(self, "penalty", replace(self.penalty, kind="mmd"))

    def proxy_spec(self) -> "MethodSpec | None":
        if self.method == "IW-ERM":
            return MethodSpec("ERM-Pool", epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        if self.method in USES_CIP_PROXY:
            return MethodSpec("CIP", PenaltySpec(self.cip_kind, self.penalty.bandwidth, self.lambda_cip),
                              epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        return None

    def hyperparameters(self) -> dict:
        out = {"lambda": self.penalty.lam, "kind": self.penalty.kind}
        if self.method in USES_CIP_PROXY:
            out["lambda_cip"] = self.lambda_cip
        if self.method == "groupDRO":
            out = {"eta": self.groupdro_eta}
        return out


@dataclass
class TrainedRun:
    spec: MethodSpec
    seed: int
    model: LinearModel
    proxy: LinearModel | None = None
    weights: ImportanceWeights | None = None
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.spec.method,
            "seed": self.seed,
            "hyperparameters": self.spec.hyperparameters(),
            "model": self.model.to_dict(),
            "proxy": None if self.proxy is None else self.proxy.to_dict(),
            "weights": None if self.weights is None else self.weights.to_dict(),
            "metrics": self.metrics,
            "history": self.history,
        }


# ---------------------------------------------------------------- objectives

@dataclass
class _Stream:
    x: np.ndarray
    y: np.ndarray | None = None
    w: np.ndarray | None = None  # per-sample loss weights


class _Objective:
    """Computes the objective and its gradient w.r.t. the score rows of each batch."""

    needs_target = False

    def __init__(self, spec: MethodSpec, proxy: LinearModel | None = None):
        self.spec = spec
        self.lam = spec.penalty.lam
        self.proxy = proxy

    def __call__(self, s_src, batches, s_tgt, tgt_x):
        raise NotImplementedError


def _class_batches(s, y, classes):
    return [FeatureBatch(s[y == c]) for c in range(classes)]


def _average_risk(s_src, batches):
    m = len(s_src)
    total, grads = 0.0, []
    for s, b in zip(s_src, batches):
        loss, g = cross_entropy_from_scores(s, b.y, b.w)
        total += loss / m
        grads.append(g / m)
    return total, grads


class _AverageRisk(_Objective):
    """Mean over domains of (weighted) cross-entropy."""

    def __call__(self, s_src, batches, s_tgt, tgt_x):
        total, grads = _average_risk(s_src, batches)
        return total, 0.0, grads, None


class _CIP(_Objective):
    def __init__(self, spec, proxy=None, classes=2):
        super().__init__(spec, proxy)
        self.classes = classes

    def __call__(self, s_src, batches, s_tgt, tgt_x):
        risk, grads = _average_risk(s_src, batches)
        per_domain = [_class_batches(s, b.y, self.classes) for s, b in zip(s_src, batches)]
        pen, pgrads = cip_penalty(per_domain, self.spec.penalty)
        for g, b, pg in zip(grads, batches, pgrads):
            for c in range(self.classes):
                g[b.y == c] += self.lam * pg[c]
        return risk + self.lam * pen, pen, grads, None


class _DIP(_Objective):
    """Risk plus marginal (or joint, with a frozen proxy) matching to the target, per source."""

    needs_target = True

    def __init__(self, spec, proxy=None, joint=False, weight_penalty=False):
        super().__init__(spec, proxy)
        self.joint = joint
        self.weight_penalty = weight_penalty

    def __call__(self, s_src, batches, s_tgt, tgt_x):
        m = len(s_src)
        tgt_feat = FeatureBatch(s_tgt)
        tgt_cic = FeatureBatch(scores(self.proxy, tgt_x)) if self.joint else None
        total, pen_total, grads = 0.0, 0.0, []
        g_tgt = np.zeros_like(s_tgt)
        for s, b in zip(s_src, batches):
            loss, g = cross_entropy_from_scores(s, b.y, b.w)
            if self.weight_penalty and not np.any(b.w > 0):
                # the whole batch carries zero weight: nothing to match
                total += loss / m
                grads.append(g / m)
                continue
            src_feat = FeatureBatch(s, b.w if self.weight_penalty else None)
            if self.joint:
                pen, gs, gt = joint_dip_penalty(src_feat, tgt_feat, FeatureBatch(scores(self.proxy, b.x)),
                                                tgt_cic, self.spec.penalty)
            else:
                pen, gs, gt = dip_penalty(src_feat, tgt_feat, self.spec.penalty)
            total += (loss + self.lam * pen) / m
            pen_total += pen / m
            grads.append((g + self.lam * gs) / m)
            g_tgt += self.lam * gt / m
        return total, pen_total, grads, g_tgt


class _IRM(_Objective):
    def __call__(self, s_src, batches, s_tgt, tgt_x):
        m = len(s_src)
        total, pen_total, grads = 0.0, 0.0, []
        for s, b in zip(s_src, batches):
            loss, g = cross_entropy_from_scores(s, b.y)
            pen, gp = irm_penalty(s, b.y)
            total += (loss + self.lam * pen) / m
            pen_total += pen / m
            grads.append((g + self.lam * gp) / m)
        return total, pen_total, grads, None


class _VREx(_Objective):
    def __call__(self, s_src, batches, s_tgt, tgt_x):
        m = len(s_src)
        pairs = [cross_entropy_from_scores(s, b.y) for s, b in zip(s_src, batches)]
        risks = np.array([r for r, _ in pairs])
        mean = risks.mean()
        var = float(np.mean((risks - mean) ** 2))
        coef = 1.0 / m + self.lam * 2.0 * (risks - mean) / m
        grads = [c * g for c, (_, g) in zip(coef, pairs)]
        return float(mean + self.lam * var), var, grads, None


class _GroupDRO(_Objective):
    def __init__(self, spec, proxy=None, num_domains=1):
        super().__init__(spec, proxy)
        self.q = np.full(num_domains, 1.0 / num_domains)
        self.trajectory = []

    def __call__(self, s_src, batches, s_tgt, tgt_x):
        pairs = [cross_entropy_from_scores(s, b.y) for s, b in zip(s_src, batches)]
        risks = np.array([r for r, _ in pairs])
        q = self.q * np.exp(self.spec.groupdro_eta * (risks - risks.max()))
        self.q = q / q.sum()
        self.trajectory.append(self.q.copy())
        grads = [qm * g for qm, (_, g) in zip(self.q, pairs)]
        return float(self.q @ risks), 0.0, grads, None


def irm_penalty(s: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared derivative of the mean cross-entropy w.r.t. a scalar score multiplier at 1."""
    n = s.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(s)
    p = softmax(s)
    onehot = np.zeros_like(s)
    onehot[np.arange(n), y] = 1.0
    resid = p - onehot
    g = float(np.sum(resid * s)) / n
    s_bar = np.sum(p * s, axis=1, keepdims=True)
    grad = (2.0 * g / n) * (resid + p * (s - s_bar))
    return g * g, grad


# ---------------------------------------------------------------- training loop

def fit(objective: _Objective, model: LinearModel, streams: Sequence[_Stream], target_x: np.ndarray | None,
        epochs: int, batch_size: int, lr: float, rng: np.random.Generator):
    """Run Adam over mini-batches; returns the final model and per-epoch history."""
    state = AdamState(lr=lr)
    sizes = [s.x.shape[0] for s in streams]
    if target_x is not None:
        sizes.append(target_x.shape[0])
    steps = math.ceil(max(sizes) / batch_size) if sizes else 0
    history = []
    for epoch in range(epochs):
        perms = [rng.permutation(n) for n in sizes]
        obj_sum = pen_sum = 0.0
        for k in range(steps):
            window = np.arange(k * batch_size, (k + 1) * batch_size)
            idx = [perm[window % perm.size] for perm in perms]
            batches = [_Stream(st.x[i], st.y[i], None if st.w is None else st.w[i]) for st, i in zip(streams, idx)]
            tgt_x = target_x[idx[-1]] if target_x is not None else None
            s_src = [b.x @ model.a.T + model.b for b in batches]
            s_tgt = None if tgt_x is None else tgt_x @ model.a.T + model.b
            value, pen, g_src, g_tgt = objective(s_src, batches, s_tgt, tgt_x)
            grad_a = np.zeros_like(model.a)
            grad_b = np.zeros_like(model.b)
            for b, g in zip(batches, g_src):
                ga, gb = backprop_scores(b.x, g)
                grad_a += ga
                grad_b += gb
            if g_tgt is not None:
                ga, gb = backprop_scores(tgt_x, g_tgt)
                grad_a += ga
                grad_b += gb
            model, state = adam_step(state, model, (grad_a, grad_b))
            obj_sum += value
            pen_sum += pen
        history.append({"epoch": epoch + 1, "objective": obj_sum / steps, "penalty": pen_sum / steps})
    return model, history


def _build_objective(spec: MethodSpec, proxy, classes, num_domains):
    method = spec.method
    if method in ("Tar", "ERM", "ERM-Pool", "IW-ERM"):
        return _AverageRisk(spec)
    if method in ("CIP", "IW-CIP"):
        return _CIP(spec, classes=classes)
    if method in ("DIP", "DIP-Pool"):
        return _DIP(spec)
    if method == "IW-DIP":
        return _DIP(spec, weight_penalty=True)
    if method in ("JointDIP", "JointDIP-Pool"):
        return _DIP(spec, proxy=proxy, joint=True)
    if method == "IW-JointDIP":
        return _DIP(spec, proxy=proxy, joint=True, weight_penalty=True)
    if method == "IRM":
        return _IRM(spec)
    if method == "V-REx":
        return _VREx(spec)
    if method == "groupDRO":
        return _GroupDRO(spec, num_domains=num_domains)
    raise ConfigError(f"unknown method {method!r}")


def validation_indices(n_target: int, seed: int) -> np.ndarray:
    """The labeled target rows used for hyperparameter selection (10%, fixed per seed)."""
    k = math.ceil(VALIDATION_FRACTION * n_target)
    return np.sort(make_rng(seed, "validation").permutation(n_target)[:k])


def train_method(spec: MethodSpec, scenario: ScenarioSpec, data: Sequence[Dataset], seed: int,
                 cache: dict | None = None) -> TrainedRun:
    """Train one method on one realized scenario.

    ``data`` holds the M source datasets followed by the target dataset.
    Target labels are read only by ``Tar`` and by metric reporting.  ``cache``
    (optional) shares frozen proxy runs between staged methods of the same seed.
    """
    m_src = scenario.num_source_domains
    if len(data) != m_src + 1:
        raise ShapeMismatch(f"expected {m_src + 1} datasets, got {len(data)}")
    sources, target = list(data[:m_src]), data[m_src]
    dip_idx = scenario.dip_source_index - 1

    proxy_run = None
    weights = None
    proxy_spec = spec.proxy_spec()
    fit_sources = sources
    if proxy_spec is not None:
        if spec.split:
            thirds = [split_thirds(d) for d in sources]
            proxy_data = [t[0] for t in thirds] + [target]
            proxy_run = _cached_train(proxy_spec, scenario, proxy_data, seed, cache, tag="split")
            weight_sources = [t[1] for t in thirds]
            fit_sources = [t[2] for t in thirds]
        else:
            proxy_run = _cached_train(proxy_spec, scenario, data, seed, cache)
            weight_sources = sources
    if spec.method in IMPORTANCE_WEIGHTED:
        weights = estimate_domain_weights(proxy_run.model, weight_sources, target.x)

    method = spec.method
    if method == "Tar":
        used = [target]
    elif method in SINGLE_SOURCE:
        used = [fit_sources[dip_idx]]
    else:
        used = fit_sources
    if weights is not None:
        used_w = [weights.per_domain[dip_idx]] if method in SINGLE_SOURCE else list(weights.per_domain)
        streams = [_Stream(d.x, d.y, w[d.y]) for d, w in zip(used, used_w)]
    else:
        streams = [_Stream(d.x, d.y) for d in used]

    objective = _build_objective(spec, None if proxy_run is None else proxy_run.model,
                                 scenario.classes, len(streams))
    rng = make_rng(seed, "train", method)
    model = LinearModel.init(rng, scenario.dimension, scenario.classes)
    target_x = target.x if objective.needs_target else None
    model, history = fit(objective, model, streams, target_x, spec.epochs, spec.batch_size, spec.lr, rng)

    run = TrainedRun(spec, seed, model, None if proxy_run is None else proxy_run.model, weights,
                     history=history)
    if isinstance(objective, _GroupDRO):
        run.extras["groupdro_q"] = np.array(objective.trajectory)
    run.metrics = evaluate(run, scenario, data)
    return run


def split_thirds(ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """Three contiguous, (nearly) equal parts of a dataset."""
    parts = np.array_split(np.arange(len(ds)), 3)
    return tuple(ds.subset(p) for p in parts)


def _cached_train(spec, scenario, data, seed, cache, tag=""):
    if cache is None:
        return train_method(spec, scenario, data, seed)
    key = (spec, seed, tag)
    if key not in cache:
        cache[key] = train_method(spec, scenario, data, seed)
    return cache[key]


def evaluate(run: TrainedRun, scenario: ScenarioSpec, data: Sequence[Dataset]) -> dict:
    """Accuracies (fractions) and cross-entropy risks of a trained run."""
    m_src = scenario.num_source_domains
    sources, target = list(data[:m_src]), data[m_src]
    model = run.model
    if run.spec.method in SINGLE_SOURCE:
        src_acc = accuracy(model, sources[scenario.dip_source_index - 1])
    else:
        src_acc = float(np.mean([accuracy(model, d) for d in sources]))
    weights = run.weights.per_domain if run.weights is not None else [None] * m_src
    src_risks = [cross_entropy_risk(model, d, w) for d, w in zip(sources, weights)]
    val = target.subset(validation_indices(len(target), run.seed))
    tgt_risk = cross_entropy_risk(model, target)
    return {
        "source_acc": src_acc,
        "target_acc": accuracy(model, target),
        "target_val_acc": accuracy(model, val),
        "source_risk": float(np.mean(src_risks)),
        "target_risk": tgt_risk,
        "risk_diff": tgt_risk - float(np.mean(src_risks)),
    }


# ---------------------------------------------------------------- diagnostics

def deviation_diagnostic(features: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                         classes: int | None = None) -> dict[int, float]:
    """Average Mahalanobis-type discrepancy of class-conditional feature means.

    For each label ``y`` and each domain ``m >= 2`` the class-``y`` mean
    difference to domain 1 is measured in the metric of domain ``m``'s
    class-``y`` covariance (ridge ``1e-8 * trace / q`` on the diagonal), and the
    results are averaged over the ``M - 1`` comparisons.
    """
    if len(features) < 2 or len(features) != len(labels):
        raise ValueError("need at least two domains with one label vector each")
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    feats = [f.reshape(-1, 1) if f.ndim == 1 else f for f in feats]
    labs = [np.asarray(lab) for lab in labels]
    q = feats[0].shape[1]
    classes = int(max(lab.max() for lab in labs)) + 1 if classes is None else classes
    per_class = []
    for y in range(classes):
        groups = [f[lab == y] for f, lab in zip(feats, labs)]
        if any(g.shape[0] == 0 for g in groups):
            raise DegenerateClass(f"class {y} is absent from some domain")
        if any(g.shape[0] < q + 1 for g in groups[1:]):
            raise DegenerateClass(f"class {y} has fewer than q+1 samples in some domain")
        per_class.append(groups)
    out = {}
    for y, groups in enumerate(per_class):
        base = groups[0].mean(axis=0)
        total = 0.0
        for g in groups[1:]:
            delta = g.mean(axis=0) - base
            cov = np.atleast_2d(np.cov(g, rowvar=False))
            trace = float(np.trace(cov))
            if trace == 0.0:
                if np.any(delta):
                    raise DegenerateClass(f"class {y} has constant features but shifted means")
                continue
            cov = cov + (1e-8 * trace / q) * np.eye(q)
            total += float(delta @ np.linalg.solve(cov, delta))
        out[y] = total / (len(groups) - 1)
    return out


def model_deviation_diagnostic(model: LinearModel, datasets: Sequence[Dataset]) -> dict[int, float]:
    return deviation_diagnostic([scores(model, d.x) for d in datasets], [d.y for d in datasets], model.classes)
