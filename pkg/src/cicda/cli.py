"""Command-line entry point: ``cicda {generate,train,suite,detect,coefs,domains}``.

Exit codes: 0 on success, 1 when any training cell failed, 2 on a
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .algorithms import MethodSpec, train_method
from .errors import CICDAError, ConfigError, UnknownPreset
from .penalties import PenaltySpec
from .scm import generate_scenario_data, scenario_for_seed, scenario_to_dict, write_datasets_csv

log = logging.getLogger("cicda")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cicda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_grid=True):
        p.add_argument("--config", type=Path, help="JSON file mirroring SuiteConfig; flags override it")
        p.add_argument("--scenario")
        p.add_argument("--seeds", type=_ints, help="comma list or ranges, e.g. 0-9")
        p.add_argument("--penalty", choices=("mean", "mmd"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--samples-per-domain", type=int)
        p.add_argument("--num-sources", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--jobs", type=int)
        p.add_argument("--lambda-cip", type=float)
        if with_grid:
            p.add_argument("--lambda-grid", type=_floats)

    p = sub.add_parser("generate", help="write one seed's datasets as CSV")
    common(p, with_grid=False)

    p = sub.add_parser("train", help="train one method on one seed")
    common(p, with_grid=False)
    p.add_argument("--method", required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--split", action="store_true", default=None)

    p = sub.add_parser("suite", help="grid-selected table over seeds")
    common(p)
    p.add_argument("--methods", type=_strs)
    p.add_argument("--split", action="store_true", default=None)
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")

    p = sub.add_parser("detect", help="accuracy upper bounds for DIP and JointDIP")
    common(p)
    p.add_argument("--alpha-list", type=_floats)
    p.add_argument("--force", action="store_true", default=None)
    p.add_argument("--source", type=int, default=0, help="1-based source domain for the bound (0: DIP source)")

    p = sub.add_parser("coefs", help="per-group L1 coefficient norms at the selected hyperparameters")
    common(p)
    p.add_argument("--methods", type=_strs)

    p = sub.add_parser("domains", help="CIP risk difference as the number of source domains varies")
    common(p)
    p.add_argument("--counts", type=_ints, default=[2, 3, 4, 5, 6, 7])
    return parser


def load_config(args: argparse.Namespace) -> harness.SuiteConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    for f in fields(harness.SuiteConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            base[f.name] = str(value) if isinstance(value, Path) else value
    return harness.SuiteConfig.from_dict(base).validate()


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    log.info("wrote %s", out / name)


def cmd_generate(args, cfg: harness.SuiteConfig) -> int:
    seed = cfg.seeds[0]
    scenario = scenario_for_seed(cfg.scenario, seed, samples_per_domain=cfg.samples_per_domain,
                                 num_sources=cfg.num_sources)
    data = generate_scenario_data(scenario, seed)
    if cfg.out is None:
        write_datasets_csv(data, sys.stdout)
        return 0
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_datasets_csv(data, out / f"{cfg.scenario}_seed{seed}.csv")
    (out / f"{cfg.scenario}_seed{seed}_scenario.json").write_text(json.dumps(scenario_to_dict(scenario)))
    return 0


def cmd_train(args, cfg: harness.SuiteConfig) -> int:
    seed = cfg.seeds[0]
    scenario = scenario_for_seed(cfg.scenario, seed, samples_per_domain=cfg.samples_per_domain,
                                 num_sources=cfg.num_sources)
    data = generate_scenario_data(scenario, seed)
    spec = MethodSpec(args.method, PenaltySpec(cfg.penalty, lam=args.lam),
                      lambda_cip=1.0 if cfg.lambda_cip is None else cfg.lambda_cip, cip_kind=cfg.penalty,
                      epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, groupdro_eta=args.eta,
                      split=cfg.split)
    run = train_method(spec, scenario, data, seed)
    _emit(json.dumps(run.to_dict(), indent=2) + "\n", None if cfg.out is None else Path(cfg.out),
          f"{args.method}_seed{seed}.json")
    return 0


def cmd_suite(args, cfg: harness.SuiteConfig) -> int:
    table = harness.run_suite(cfg)
    if cfg.out is not None:
        harness.write_suite_outputs(table, cfg.out)
    sys.stdout.write(harness.emit_table(table, args.format))
    return 1 if table.failed_cells else 0


def cmd_detect(args, cfg: harness.SuiteConfig) -> int:
    rows = harness.run_detection_experiment(cfg, source_index=args.source)
    if cfg.out is not None:
        _emit(harness.emit_detection_jsonl(rows), Path(cfg.out), "detection.jsonl")
    _emit(harness.emit_detection_csv(rows), None if cfg.out is None else Path(cfg.out), "detection.csv")
    expected = 2 * len(cfg.lambda_grid) * len(cfg.alpha_list) * len(cfg.seeds)
    return 0 if sum(1 for r in rows if r["seed"] != "mean") == expected else 1


def cmd_coefs(args, cfg: harness.SuiteConfig) -> int:
    table = harness.run_suite(cfg)
    norms = harness.run_coefficient_groups(table)
    _emit(json.dumps(norms, indent=2, sort_keys=True) + "\n", None if cfg.out is None else Path(cfg.out),
          "coefficient_groups.json")
    return 1 if table.failed_cells else 0


def cmd_domains(args, cfg: harness.SuiteConfig) -> int:
    rows = harness.run_domain_count_experiment(cfg, counts=args.counts)
    _emit(harness.emit_domain_count_csv(rows), None if cfg.out is None else Path(cfg.out), "domain_count.csv")
    return 0 if len(rows) == len(args.counts) else 1


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "suite": cmd_suite,
    "detect": cmd_detect, "coefs": cmd_coefs, "domains": cmd_domains,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, UnknownPreset, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UnknownPreset) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CICDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
