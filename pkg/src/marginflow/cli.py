"""Command-line entry points.

Verbs:
  run            execute a configured scenario; exit 1 on any failure
  validate-loss  print the clause report for one or more loss families
  kkt-report     certificates at checkpoints along a configured run
  rates          rate diagnostic plus bounded-ratio verdict
  hat            integrate the rotating construction and write its CSV
"""

from __future__ import annotations

import argparse
import json
import sys

from .losses import get_loss, validate_b3
from .rates import bounded_ratio_verdict, rate_ratios
from .runner import (RunConfig, SCENARIOS, _jsonable, config_digest,
                     kkt_report, load_config, run_scenario)


def _add_config(p: argparse.ArgumentParser, required: bool = True):
    p.add_argument("--config", required=required,
                   help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="override the configured seed list with one seed")
    p.add_argument("--out", default=None, help="override the output dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginflow",
        description="margin dynamics experiments for homogeneous models")
    sub = parser.add_subparsers(dest="verb", required=True)

    _add_config(sub.add_parser("run", help="execute a scenario config"))

    p = sub.add_parser("validate-loss", help="check loss family conditions")
    p.add_argument("--loss", nargs="+", default=["exp", "logistic"],
                   help="registered loss names")

    _add_config(sub.add_parser(
        "kkt-report", help="optimality certificates along a run"))
    _add_config(sub.add_parser(
        "rates", help="loss and norm rate diagnostic for a run"))

    p = sub.add_parser("hat", help="run the rotating counterexample")
    _add_config(p, required=False)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    outcome = run_scenario(cfg, seed=args.seed, out_dir=args.out)
    report = {
        "scenario": cfg.scenario,
        "config_sha256": config_digest(cfg.raw),
        "runs": len(outcome.summaries),
        "files": [str(p) for p in outcome.paths],
        "failures": outcome.failures,
    }
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0 if outcome.ok else 1


def cmd_validate_loss(args) -> int:
    reports = []
    ok = True
    for name in args.loss:
        report = validate_b3(get_loss(name))
        ok = ok and report.ok
        reports.append({
            "loss": report.loss_name,
            "ok": report.ok,
            "clauses": [
                {"clause": c.clause, "passed": c.passed, "worst": c.worst}
                for c in report.clauses
            ],
        })
    print(json.dumps(reports, indent=2, sort_keys=True))
    return 0 if ok else 1


def cmd_kkt_report(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    report = kkt_report(cfg, seed)
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


def cmd_rates(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    result = SCENARIOS["rates"](cfg, seed)
    print(json.dumps(_jsonable(result["summary"]), indent=2, sort_keys=True))
    return 0 if not result["failures"] else 1


def cmd_hat(args) -> int:
    if args.config:
        cfg = _load(args)
        if cfg.scenario != "mexican_hat":
            raise SystemExit("hat expects a mexican_hat config")
    else:
        cfg = RunConfig.from_dict({"scenario": "mexican_hat"})
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    outcome = run_scenario(cfg, seed=seed, out_dir=args.out)
    print(json.dumps(_jsonable(outcome.summaries[0]), indent=2,
                     sort_keys=True))
    return 0 if outcome.ok else 1


COMMANDS = {
    "run": cmd_run,
    "validate-loss": cmd_validate_loss,
    "kkt-report": cmd_kkt_report,
    "rates": cmd_rates,
    "hat": cmd_hat,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
