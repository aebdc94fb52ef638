"""Synthetic multi-domain data from anticausal linear SCMs.

Every domain draws ``Y`` from its own label distribution and sets
``X = f(Y) + noise`` where ``f`` is a per-domain table of class means and the
noise is Gaussian with a per-block standard deviation.

Conventions used throughout the package:

* labels are 0-based class indices (the binary SCMs use 0/1 exactly as the
  generating equations do);
* domain ids are 1-based: sources are ``1..M`` and the target is ``M+1``;
* coordinate ranges are 0-based half-open ``(start, stop)`` pairs, so the
  label-flipping block "coordinates 7-12" is ``(6, 12)``.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ShapeMismatch, UnknownPreset
from .numerics import Rng, make_rng

PRESETS = ("SCM-I", "SCM-II", "SCM-III", "SCM-IV", "SCM-binary", "custom")
LABEL_SHIFT_PRESETS = ("SCM-II", "SCM-IV")


@dataclass(frozen=True)
class DomainMechanism:
    label_probs: np.ndarray
    means: np.ndarray  # (L, p) class-conditional means
    noise_blocks: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        probs = np.asarray(self.label_probs, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "label_probs", probs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "noise_blocks", tuple((int(a), int(b), float(s)) for a, b, s in self.noise_blocks))
        if means.ndim != 2 or means.shape[0] != probs.shape[0]:
            raise ShapeMismatch("means must be an (L, p) table matching label_probs")
        if np.any(probs <= 0) or np.any(probs >= 1) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"label_probs must lie in (0, 1) and sum to 1, got {probs}")
        if not np.all(np.isfinite(means)):
            raise ValueError("mean table must be finite")

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    def noise_sd(self) -> np.ndarray:
        sd = np.zeros(self.dimension)
        for start, stop, s in self.noise_blocks:
            sd[start:stop] = s
        return sd


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    domain_id: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"x has {x.shape[0]} rows but y has {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, mask_or_idx) -> "Dataset":
        return Dataset(self.x[mask_or_idx], self.y[mask_or_idx], self.domain_id)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    num_source_domains: int
    samples_per_domain: int
    dimension: int
    classes: int
    mechanisms: tuple[DomainMechanism, ...]
    coordinate_groups: Mapping[str, tuple[int, int]] = field(default_factory=dict)
    dip_source_index: int = 0  # 1-based domain id; 0 means "last source"

    def __post_init__(self):
        m = self.num_source_domains
        if len(self.mechanisms) != m + 1:
            raise ValueError(f"need {m + 1} mechanisms (M sources + target), got {len(self.mechanisms)}")
        if self.dip_source_index == 0:
            object.__setattr__(self, "dip_source_index", m)
        if not 1 <= self.dip_source_index <= m:
            raise ValueError("dip_source_index must name a source domain")
        for mech in self.mechanisms:
            if mech.means.shape != (self.classes, self.dimension):
                raise ShapeMismatch("mechanism mean table does not match (classes, dimension)")

    @property
    def target_id(self) -> int:
        return self.num_source_domains + 1

    @property
    def has_label_shift(self) -> bool:
        src = self.mechanisms[0].label_probs
        return any(not np.allclose(mech.label_probs, src) for mech in self.mechanisms)


def generate_domain(mech: DomainMechanism, n: int, rng: Rng, domain_id: int = 0) -> Dataset:
    """Draw ``n`` labeled samples: labels first, then the noise matrix."""
    if n < 1:
        raise ValueError("n must be at least 1")
    y = rng.choice(mech.label_probs.shape[0], size=n, p=mech.label_probs)
    noise = rng.standard_normal((n, mech.dimension)) * mech.noise_sd()
    return Dataset(mech.means[y] + noise, y, domain_id)


def generate_scenario_data(scenario: ScenarioSpec, seed: int, n: int | None = None) -> list[Dataset]:
    """One dataset per domain, sources first; domain m uses its own substream."""
    n = scenario.samples_per_domain if n is None else n
    return [
        generate_domain(mech, n, make_rng(seed, "data", m), domain_id=m)
        for m, mech in enumerate(scenario.mechanisms, start=1)
    ]


# ---------------------------------------------------------------- presets

def _binary_means(center: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Rows for y=0 and y=1 of ``center + slope * (y - 0.5)``."""
    return np.vstack([center - 0.5 * slope, center + 0.5 * slope])


def _scm_i(rng: Rng, n: int) -> ScenarioSpec:
    p, m_src = 10, 3
    shifts = [0.2 * rng.standard_normal(p) for _ in range(m_src)]
    shifts.append(2.0 * np.sign(rng.standard_normal(p)))
    # X = 0.2 Y 1 + A: class 0 sits at A, class 1 at A + 0.2
    mechs = tuple(
        DomainMechanism(np.array([0.5, 0.5]), np.vstack([a, a + 0.2]), ((0, p, 0.25),))
        for a in shifts
    )
    return ScenarioSpec("SCM-I", m_src, n, p, 2, mechs, {"mean_shift": (0, 10)})


def _scm_ii(rng: Rng, n: int) -> ScenarioSpec:
    p, m_src = 9, 11
    shifts = [rng.standard_normal(6) for _ in range(m_src)]
    shifts.append(2.0 * np.sign(rng.standard_normal(6)))
    slope = np.full(p, 0.2)
    mechs = []
    for m, a in enumerate(shifts, start=1):
        center = np.concatenate([a, np.zeros(3)])
        probs = np.array([0.9, 0.1]) if m == m_src + 1 else np.array([0.5, 0.5])
        mechs.append(DomainMechanism(probs, _binary_means(center, slope), ((0, p, 0.25),)))
    return ScenarioSpec("SCM-II", m_src, n, p, 2, tuple(mechs), {"mean_shift": (0, 6), "cic": (6, 9)})


def _scm_iii(rng: Rng, n: int, target_p1: float = 0.5, name: str = "SCM-III") -> ScenarioSpec:
    p, m_src = 18, 11
    shifts = [rng.standard_normal(6) for _ in range(m_src - 1)]
    a0 = 0.8 * rng.standard_normal(6)
    a1 = 0.6 * rng.standard_normal(6)
    a2 = 0.6 * rng.standard_normal(6)
    shifts += [a0 + a1, a0 + a2]
    noise = ((0, 6, 0.4), (6, 12, 0.1), (12, 18, 0.4))
    mechs = []
    for m, a in enumerate(shifts, start=1):
        flip = -1.0 if m % 2 else 1.0
        slope = np.concatenate([np.full(6, 0.3), np.full(6, 0.3 * flip), np.full(6, 0.3)])
        center = np.concatenate([a, np.zeros(12)])
        probs = np.array([1 - target_p1, target_p1]) if m == m_src + 1 else np.array([0.5, 0.5])
        mechs.append(DomainMechanism(probs, _binary_means(center, slope), noise))
    groups = {"mean_shift": (0, 6), "label_flip": (6, 12), "cic": (12, 18)}
    return ScenarioSpec(name, m_src, n, p, 2, tuple(mechs), groups)


def _scm_binary(rng: Rng, n: int, num_sources: int = 7) -> ScenarioSpec:
    p = 10
    corners = np.array(list(itertools.product([-1.0, 1.0], repeat=5)))
    if not 1 <= num_sources <= len(corners):
        raise ValueError(f"SCM-binary supports 1..{len(corners)} source domains")
    picks = rng.choice(len(corners), size=num_sources, replace=False)
    shifts = [corners[k] for k in picks] + [np.full(5, 2.0)]
    slope = np.full(p, 0.2)
    mechs = tuple(
        DomainMechanism(np.array([0.5, 0.5]), _binary_means(np.concatenate([np.zeros(5), a]), slope), ((0, p, 0.4),))
        for a in shifts
    )
    return ScenarioSpec("SCM-binary", num_sources, n, p, 2, mechs, {"cic": (0, 5), "mean_shift": (5, 10)})


def build_scenario(preset: str, rng: Rng, *, samples_per_domain: int = 1000,
                   num_sources: int | None = None, config: Mapping | None = None) -> ScenarioSpec:
    """Realize a preset's random shift constants once, so every method sees the same domains.

    ``num_sources`` only applies to SCM-binary; ``config`` is required for
    ``custom`` and follows :func:`scenario_to_dict`.
    """
    n = samples_per_domain
    if preset == "SCM-I":
        return _scm_i(rng, n)
    if preset == "SCM-II":
        return _scm_ii(rng, n)
    if preset == "SCM-III":
        return _scm_iii(rng, n)
    if preset == "SCM-IV":
        return _scm_iii(rng, n, target_p1=0.3, name="SCM-IV")
    if preset == "SCM-binary":
        return _scm_binary(rng, n, 7 if num_sources is None else num_sources)
    if preset == "custom":
        if config is None:
            raise UnknownPreset("custom scenario needs a config mapping")
        return scenario_from_dict(config)
    raise UnknownPreset(f"unknown scenario preset {preset!r}; choose from {', '.join(PRESETS)}")


def scenario_for_seed(preset: str, seed: int, **kwargs) -> ScenarioSpec:
    return build_scenario(preset, make_rng(seed, "scenario"), **kwargs)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "name": spec.name,
        "num_source_domains": spec.num_source_domains,
        "samples_per_domain": spec.samples_per_domain,
        "dimension": spec.dimension,
        "classes": spec.classes,
        "dip_source_index": spec.dip_source_index,
        "coordinate_groups": {k: list(v) for k, v in spec.coordinate_groups.items()},
        "mechanisms": [
            {"label_probs": m.label_probs.tolist(), "means": m.means.tolist(),
             "noise_blocks": [list(b) for b in m.noise_blocks]}
            for m in spec.mechanisms
        ],
    }


def scenario_from_dict(d: Mapping) -> ScenarioSpec:
    mechs = tuple(
        DomainMechanism(np.array(m["label_probs"]), np.array(m["means"]), tuple(tuple(b) for b in m["noise_blocks"]))
        for m in d["mechanisms"]
    )
    num_sources = int(d.get("num_source_domains", len(mechs) - 1))
    return ScenarioSpec(
        name=d.get("name", "custom"),
        num_source_domains=num_sources,
        samples_per_domain=int(d.get("samples_per_domain", 1000)),
        dimension=mechs[0].dimension,
        classes=mechs[0].label_probs.shape[0],
        mechanisms=mechs,
        coordinate_groups={k: tuple(v) for k, v in d.get("coordinate_groups", {}).items()},
        dip_source_index=int(d.get("dip_source_index", 0)),
    )


def coordinate_group_norms(model, groups: Mapping[str, tuple[int, int]]) -> dict[str, float]:
    """Sum of absolute score weights over each coordinate block (all classes)."""
    a = np.asarray(model.a)
    out = {}
    for name, (start, stop) in groups.items():
        if not 0 <= start <= stop <= a.shape[1]:
            raise ValueError(f"group {name!r} range {(start, stop)} outside 0..{a.shape[1]}")
        out[name] = float(np.abs(a[:, start:stop]).sum())
    return out


# ---------------------------------------------------------------- CSV

def write_datasets_csv(datasets: Iterable[Dataset], dest: str | Path | io.TextIOBase) -> None:
    """Write ``domain,y,x1..xp`` rows; floats keep 17 significant digits."""
    datasets = list(datasets)
    p = datasets[0].x.shape[1] if datasets else 0
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "y"] + [f"x{j}" for j in range(1, p + 1)])
        for ds in datasets:
            for row, label in zip(ds.x, ds.y):
                w.writerow([ds.domain_id, int(label)] + [format(v, ".17g") for v in row])
    finally:
        if own:
            fh.close()


def read_datasets_csv(src: str | Path | io.TextIOBase) -> list[Dataset]:
    own = isinstance(src, (str, Path))
    fh = open(src, newline="") if own else src
    try:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["domain", "y"]:
            raise ValueError("dataset CSV must start with columns domain,y")
        rows: dict[int, tuple[list, list]] = {}
        for rec in reader:
            if not rec:
                continue
            xs, ys = rows.setdefault(int(rec[0]), ([], []))
            ys.append(int(rec[1]))
            xs.append([float(v) for v in rec[2:]])
    finally:
        if own:
            fh.close()
    p = len(header) - 2
    return [Dataset(np.array(xs, dtype=np.float64).reshape(-1, p), np.array(ys), dom)
            for dom, (xs, ys) in sorted(rows.items())]


def source_and_target(data: Sequence[Dataset], scenario: ScenarioSpec) -> tuple[list[Dataset], Dataset]:
    m = scenario.num_source_domains
    return list(data[:m]), data[m]
