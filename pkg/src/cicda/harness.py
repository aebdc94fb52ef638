"""Experiment runner: grid-selected method suites, detection bounds and the domain-count sweep.

Work is split into per-seed jobs.  A job builds the seed's scenario and data
once, trains every requested (method, hyperparameter) cell on it and returns
plain records, so jobs can run in worker processes without shared state.
Aggregation always happens in (method, seed) order, which keeps outputs
byte-identical across reruns and across ``jobs`` settings.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .algorithms import METHODS, USES_CIP_PROXY, MethodSpec, TrainedRun, train_method
from .detection import restricted_bound, target_risk_lower_bound
from .errors import CICDAError, ConfigError
from .penalties import PenaltySpec
from .scm import LABEL_SHIFT_PRESETS, PRESETS, coordinate_group_norms, generate_scenario_data, scenario_for_seed

log = logging.getLogger(__name__)

DEFAULT_METHODS = (
    "Tar", "ERM", "ERM-Pool", "DIP", "DIP-Pool", "CIP", "IW-ERM", "IW-CIP", "IW-DIP",
    "JointDIP", "IW-JointDIP", "IRM", "V-REx", "groupDRO",
)
LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
IRM_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)
ETA_GRID = (0.01, 0.1, 1.0, 10.0)
ALPHA_LIST = (0.0, 0.25, 0.5, 0.75)
NO_HYPERPARAMETER = ("Tar", "ERM", "ERM-Pool", "IW-ERM")


@dataclass
class SuiteConfig:
    scenario: str = "SCM-I"
    methods: list = field(default_factory=lambda: list(DEFAULT_METHODS))
    seeds: list = field(default_factory=lambda: list(range(10)))
    lambda_grid: list = field(default_factory=lambda: list(LAMBDA_GRID))
    irm_grid: list = field(default_factory=lambda: list(IRM_GRID))
    eta_grid: list = field(default_factory=lambda: list(ETA_GRID))
    alpha_list: list = field(default_factory=lambda: list(ALPHA_LIST))
    penalty: str = "mean"
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-2
    samples_per_domain: int = 1000
    num_sources: int | None = None
    lambda_cip: float | None = None  # None: select it on the CIP grid first
    out: str | None = None
    jobs: int = 1
    force: bool = False
    split: bool = False

    def validate(self) -> "SuiteConfig":
        if self.scenario not in PRESETS or self.scenario == "custom":
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods: {', '.join(unknown)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.penalty not in ("mean", "mmd"):
            raise ConfigError("penalty must be 'mean' or 'mmd'")
        grids = (self.lambda_grid, self.irm_grid, self.eta_grid)
        if any(not g for g in grids) or any(v < 0 for g in grids for v in g):
            raise ConfigError("hyperparameter grids must be non-empty and non-negative")
        if any(not 0.0 <= a < 1.0 for a in self.alpha_list):
            raise ConfigError("alpha values must lie in [0, 1)")
        if self.lambda_cip is not None and self.lambda_cip < 0:
            raise ConfigError("lambda_cip must be non-negative")
        if self.jobs < 1 or self.epochs < 0 or self.batch_size < 1 or self.samples_per_domain < 1:
            raise ConfigError("jobs, batch_size and samples_per_domain must be positive; epochs >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- cells

@dataclass(frozen=True)
class CellResult:
    method: str
    value: float | None  # the tuned hyperparameter (lambda, or eta for groupDRO)
    seed: int
    metrics: dict | None
    group_norms: dict | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def hyperparameter_grid(method: str, config: SuiteConfig) -> list:
    if method in NO_HYPERPARAMETER:
        return [None]
    if method in ("IRM", "V-REx"):
        return list(config.irm_grid)
    if method == "groupDRO":
        return list(config.eta_grid)
    return list(config.lambda_grid)


def method_spec(method: str, value: float | None, config: SuiteConfig, lambda_cip: float | None) -> MethodSpec:
    lam = 1.0 if value is None or method == "groupDRO" else float(value)
    return MethodSpec(
        method,
        PenaltySpec(config.penalty, lam=lam),
        lambda_cip=1.0 if lambda_cip is None else float(lambda_cip),
        cip_kind=config.penalty,
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        groupdro_eta=float(value) if method == "groupDRO" else 0.1,
        split=config.split,
    )


def _seed_job(config: SuiteConfig, seed: int, cells: Sequence[tuple[str, float | None]],
              lambda_cip: float | None) -> list[CellResult]:
    scenario = scenario_for_seed(config.scenario, seed, samples_per_domain=config.samples_per_domain,
                                 num_sources=config.num_sources)
    data = generate_scenario_data(scenario, seed)
    cache: dict = {}
    out = []
    for method, value in cells:
        try:
            run = train_method(method_spec(method, value, config, lambda_cip), scenario, data, seed, cache)
            norms = coordinate_group_norms(run.model, scenario.coordinate_groups)
            out.append(CellResult(method, value, seed, run.metrics, norms))
        except (CICDAError, ArithmeticError, ValueError) as exc:
            log.warning("cell %s value=%s seed=%s failed: %s", method, value, seed, exc)
            out.append(CellResult(method, value, seed, None, error=f"{type(exc).__name__}: {exc}"))
    return out


def _map_seeds(config: SuiteConfig, job, args_per_seed: list[tuple]) -> list:
    """Apply ``job(config, seed, *rest)`` to every seed, in seed order."""
    if config.jobs > 1 and len(args_per_seed) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(job, config, *args) for args in args_per_seed]
            return [f.result() for f in futures]
    return [job(config, *args) for args in args_per_seed]


def run_cells(config: SuiteConfig, cells: Sequence[tuple[str, float | None]],
              lambda_cip: float | None) -> list[CellResult]:
    per_seed = _map_seeds(config, _seed_job, [(seed, list(cells), lambda_cip) for seed in config.seeds])
    order = {cell: i for i, cell in enumerate(cells)}
    flat = [r for results in per_seed for r in results]
    # stable sort: (method, value) in request order, then seeds in config order
    return sorted(flat, key=lambda r: order[(r.method, r.value)])


def select_hyperparameter(results: Iterable[CellResult], method: str) -> float | None:
    """The grid value with the best mean validation accuracy across seeds (first one on ties)."""
    by_value: dict = {}
    for r in results:
        if r.method == method and r.ok:
            by_value.setdefault(r.value, []).append(r.metrics["target_val_acc"])
    if not by_value:
        return None
    best, best_score = None, -math.inf
    for value, scores in by_value.items():
        score = float(np.mean(scores))
        if score > best_score:
            best, best_score = value, score
    return best


# ---------------------------------------------------------------- table

@dataclass(frozen=True)
class TableRow:
    method: str
    src_acc_mean: float
    src_acc_sd: float
    tar_acc_mean: float
    tar_acc_sd: float
    hyperparameter: float | None = None
    n_seeds: int = 0
    missing: int = 0


@dataclass
class ResultTable:
    scenario: str
    rows: list = field(default_factory=list)
    cells: list = field(default_factory=list)  # every CellResult that fed the table
    lambda_cip: float | None = None

    @property
    def failed_cells(self) -> int:
        return sum(1 for c in self.cells if not c.ok)

    def row(self, method: str) -> TableRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def selected_cells(self, method: str) -> list[CellResult]:
        row = self.row(method)
        return [c for c in self.cells if c.method == method and c.value == row.hyperparameter]


def _aggregate(method: str, value, results: Sequence[CellResult]) -> TableRow:
    chosen = [r for r in results if r.method == method and r.value == value]
    ok = [r for r in chosen if r.ok]
    src = 100.0 * np.array([r.metrics["source_acc"] for r in ok])
    tar = 100.0 * np.array([r.metrics["target_acc"] for r in ok])
    if not ok:
        nan = float("nan")
        return TableRow(method, nan, nan, nan, nan, value, 0, len(chosen))
    return TableRow(method, float(src.mean()), float(src.std()), float(tar.mean()), float(tar.std()),
                    value, len(ok), len(chosen) - len(ok))


def run_suite(config: SuiteConfig) -> ResultTable:
    """Grid-select each method's hyperparameter on the validation rows, then tabulate in percent.

    Staged methods reuse the CIP strength picked on the CIP grid (unless the
    config fixes ``lambda_cip``), so CIP is always tuned first.
    """
    config.validate()
    table = ResultTable(config.scenario)
    if not config.methods:
        return table
    lambda_cip = config.lambda_cip
    cells: list[CellResult] = []
    needs_proxy = any(m in USES_CIP_PROXY for m in config.methods)
    if "CIP" in config.methods or (needs_proxy and lambda_cip is None):
        cip_cells = run_cells(config, [("CIP", v) for v in hyperparameter_grid("CIP", config)], None)
        cells.extend(cip_cells)
        if lambda_cip is None:
            lambda_cip = select_hyperparameter(cip_cells, "CIP")
            if lambda_cip is None:
                raise ConfigError("every CIP cell failed; cannot choose the proxy strength")
    table.lambda_cip = lambda_cip
    rest = [(m, v) for m in config.methods if m != "CIP" for v in hyperparameter_grid(m, config)]
    if rest:
        cells.extend(run_cells(config, rest, lambda_cip))
    for method in config.methods:
        value = select_hyperparameter(cells, method)
        if value is None and method not in NO_HYPERPARAMETER:
            value = hyperparameter_grid(method, config)[0]
        table.rows.append(_aggregate(method, value, cells))
    table.cells = [c for c in cells if c.method in config.methods]
    return table


TABLE_COLUMNS = ("method", "src_acc_mean", "src_acc_sd", "tar_acc_mean", "tar_acc_sd")


def emit_table(table: ResultTable, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in table.rows:
            w.writerow([r.method] + [repr(getattr(r, c)) for c in TABLE_COLUMNS[1:]])
        return buf.getvalue()
    if fmt == "json":
        payload = {"scenario": table.scenario, "lambda_cip": table.lambda_cip,
                   "rows": [asdict(r) for r in table.rows]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if fmt == "markdown":
        lines = [f"| {table.scenario} | Source | Target |", "|---|---|---|"]
        for r in table.rows:
            lines.append(f"| {r.method} | {r.src_acc_mean:.1f}±{r.src_acc_sd:.1f} | {r.tar_acc_mean:.1f}±{r.tar_acc_sd:.1f} |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown table format {fmt!r}")


def parse_table_csv(text: str) -> list[TableRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
        raise ValueError(f"expected columns {TABLE_COLUMNS}")
    return [TableRow(rec["method"], *(float(rec[c]) for c in TABLE_COLUMNS[1:])) for rec in reader]


def emit_cells_csv(cells: Sequence[CellResult]) -> str:
    """One line per trained cell, including failures (with empty metrics)."""
    metric_keys = ("source_acc", "target_acc", "target_val_acc", "source_risk", "target_risk", "risk_diff")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "value", "seed") + metric_keys + ("error",))
    for c in cells:
        vals = [repr(c.metrics[k]) for k in metric_keys] if c.ok else [""] * len(metric_keys)
        w.writerow([c.method, "" if c.value is None else repr(c.value), c.seed] + vals + [c.error or ""])
    return buf.getvalue()


def write_suite_outputs(table: ResultTable, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(emit_table(table, "csv"))
    (out / "table.json").write_text(emit_table(table, "json"))
    (out / "table.md").write_text(emit_table(table, "markdown"))
    (out / "cells.csv").write_text(emit_cells_csv(table.cells))


# ---------------------------------------------------------------- detection experiment

DETECTION_METHODS = ("DIP", "JointDIP")
DETECTION_COLUMNS = ("method", "lambda", "alpha", "seed", "bound", "actual", "region_fraction")


def _detection_job(config: SuiteConfig, seed: int, lambda_cip: float, source_index: int) -> list[dict]:
    scenario = scenario_for_seed(config.scenario, seed, samples_per_domain=config.samples_per_domain,
                                 num_sources=config.num_sources)
    data = generate_scenario_data(scenario, seed)
    source = data[(source_index or scenario.dip_source_index) - 1]
    target = data[scenario.num_source_domains]
    # the bound needs the proxy even for plain DIP; seed the cache so JointDIP reuses it
    proxy_spec = method_spec("JointDIP", 1.0, config, lambda_cip).proxy_spec()
    proxy = train_method(proxy_spec, scenario, data, seed).model
    cache: dict = {}
    cache[(proxy_spec, seed, "")] = TrainedRun(proxy_spec, seed, proxy)
    rows = []
    for method in DETECTION_METHODS:
        for lam in config.lambda_grid:
            spec = method_spec(method, lam, config, lambda_cip)
            try:
                run = train_method(spec, scenario, data, seed, cache)
            except (CICDAError, ArithmeticError, ValueError) as exc:
                log.warning("detection cell %s lambda=%s seed=%s failed: %s", method, lam, seed, exc)
                continue
            for alpha in config.alpha_list:
                try:
                    if alpha == 0.0:
                        rep = target_risk_lower_bound(run.model, proxy, source, target.x, target.y)
                        fraction = 1.0
                    else:
                        rep = restricted_bound(run.model, proxy, source, target.x, alpha, target.y)
                        fraction = rep.region_fraction_target
                except CICDAError as exc:
                    log.warning("detection region %s lambda=%s alpha=%s seed=%s: %s", method, lam, alpha, seed, exc)
                    continue
                rows.append({"method": method, "lambda": float(lam), "alpha": float(alpha), "seed": seed,
                             "bound": rep.accuracy_upper_bound, "actual": rep.actual_target_acc,
                             "region_fraction": fraction})
    return rows


def run_detection_experiment(config: SuiteConfig, source_index: int = 0) -> list[dict]:
    """Accuracy upper bounds vs. actual accuracy for DIP and JointDIP over the lambda grid and alphas.

    ``source_index`` (1-based) picks the source domain used for the bound;
    0 means the scenario's DIP source.  Rows come per seed, followed by one
    ``seed="mean"`` row per (method, lambda, alpha).
    """
    config.validate()
    if config.split:
        raise ConfigError("the detection experiment trains on full sources; split is not supported")
    if config.scenario in LABEL_SHIFT_PRESETS and not config.force:
        raise ConfigError(f"{config.scenario} has label shift; the bound assumes none (pass force to override)")
    lambda_cip = config.lambda_cip
    if lambda_cip is None:
        cip = run_cells(config, [("CIP", v) for v in config.lambda_grid], None)
        lambda_cip = select_hyperparameter(cip, "CIP")
        if lambda_cip is None:
            raise ConfigError("every CIP cell failed; cannot choose the proxy strength")
    per_seed = _map_seeds(config, _detection_job, [(seed, lambda_cip, source_index) for seed in config.seeds])
    rows = [r for rs in per_seed for r in rs]
    key = lambda r: (DETECTION_METHODS.index(r["method"]), r["lambda"], r["alpha"])  # noqa: E731
    rows.sort(key=key)  # stable: seeds keep config order within a group
    out = []
    for i, r in enumerate(rows):
        out.append(r)
        last_of_group = i + 1 == len(rows) or key(rows[i + 1]) != key(r)
        if last_of_group:
            group = [g for g in rows if key(g) == key(r)]
            out.append({"method": r["method"], "lambda": r["lambda"], "alpha": r["alpha"], "seed": "mean",
                        "bound": float(np.mean([g["bound"] for g in group])),
                        "actual": float(np.mean([g["actual"] for g in group])),
                        "region_fraction": float(np.mean([g["region_fraction"] for g in group]))})
    return out


def emit_detection_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETECTION_COLUMNS)
    for r in rows:
        w.writerow([r["method"], repr(r["lambda"]), repr(r["alpha"]), r["seed"], repr(r["bound"]),
                    "" if r["actual"] is None else repr(r["actual"]), repr(r["region_fraction"])])
    return buf.getvalue()


def emit_detection_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# ---------------------------------------------------------------- domain-count sweep

@dataclass(frozen=True)
class DomainCountRow:
    num_sources: int
    risk_diff_mean: float
    risk_diff_sd: float
    src_acc_mean: float
    tar_acc_mean: float
    lam: float


def run_domain_count_experiment(config: SuiteConfig, counts: Sequence[int] = (2, 3, 4, 5, 6, 7)) -> list[DomainCountRow]:
    """CIP on SCM-binary with a varying number of source domains.

    The CIP strength is selected once, at the largest source count, and held
    fixed so that only ``M`` changes between rows.
    """
    config.validate()
    if not counts:
        return []

    def at(m: int) -> SuiteConfig:
        return SuiteConfig(**{**config.to_dict(), "scenario": "SCM-binary", "num_sources": int(m)})

    lam = config.lambda_cip
    if lam is None:
        lam = select_hyperparameter(run_cells(at(max(counts)), [("CIP", v) for v in config.lambda_grid], None), "CIP")
        if lam is None:
            raise ConfigError("every CIP cell failed at the largest source count")
    rows = []
    for m in counts:
        ok = [c for c in run_cells(at(m), [("CIP", lam)], None) if c.ok]
        if not ok:
            continue
        diffs = np.array([c.metrics["risk_diff"] for c in ok])
        rows.append(DomainCountRow(int(m), float(diffs.mean()), float(diffs.std()),
                                   100.0 * float(np.mean([c.metrics["source_acc"] for c in ok])),
                                   100.0 * float(np.mean([c.metrics["target_acc"] for c in ok])), float(lam)))
    return rows


def emit_domain_count_csv(rows: Sequence[DomainCountRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(DomainCountRow)]
    w.writerow(names)
    for r in rows:
        w.writerow([repr(getattr(r, n)) for n in names])
    return buf.getvalue()


# ---------------------------------------------------------------- coefficient groups

def run_coefficient_groups(table: ResultTable) -> dict[str, dict[str, float]]:
    """Mean per-group L1 coefficient norms of each method at its selected hyperparameter."""
    out = {}
    for row in table.rows:
        chosen = [c for c in table.selected_cells(row.method) if c.ok]
        if not chosen:
            continue
        names = chosen[0].group_norms.keys()
        out[row.method] = {g: float(np.mean([c.group_norms[g] for c in chosen])) for g in names}
    return out
