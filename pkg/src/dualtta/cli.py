"""Command-line entry point: pretrain, adapt, bench, theory, gradcheck.

Exit codes: 0 success, 1 contract or usage error, 2 an acceptance check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .bench.checks import corollary_check, dual_gradcheck
from .bench.experiment import ExperimentConfig, emit_reports, run_experiment, source_model
from .data import SCENARIOS, StreamScenario, gen_spurious_dataset
from .errors import ContractError, NumericOverflowError
from .model import save_checkpoint
from .theory import (MarginModelConfig, check_theorem1_monotonicity, run_bound_suite,
                     simulate_margin_model, sweep_is_monotone)
from .tta import METHODS

EXIT_OK, EXIT_CONTRACT, EXIT_ACCEPTANCE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path):
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    splits = gen_spurious_dataset(replace(cfg.dataset, seed=seed))
    model, report = source_model(replace(cfg, checkpoint=None), seed, splits)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out), "seed": seed, **asdict(report)}, indent=1))
    return EXIT_OK


def _summarize(doc):
    for r in doc["results"]:
        print(f"{r['method']:10s} seed {r['seed']:<3d} {r['scenario']:17s} acc {r['avg_acc']:.4f} "
              f"worst {r['worst_group_acc']:.4f} f1 {r['macro_f1']:.4f} "
              f"adapt {r['pct_adapt']:6.2f}% corr {r['pct_corr_adapt']:6.2f}%")
    for m, w in doc.get("wilcoxon", {}).items():
        if "p_two_sided" in w:
            print(f"wilcoxon dualtta vs {m}: W={w['W']} n={w['n']} p={w['p_two_sided']:.4g} ({w['method_used']})")
        else:
            print(f"wilcoxon dualtta vs {m}: {w['status']}")


def cmd_adapt(args):
    cfg = _load_config(args.config)
    cfg = replace(cfg, checkpoint=str(args.model), methods=[args.method], seeds=[args.seed],
                  scenarios=[StreamScenario(kind=args.scenario)])
    doc = run_experiment(cfg)
    emit_reports(doc, args.out)
    _summarize(doc)
    return EXIT_OK


def cmd_bench(args):
    cfg = _load_config(args.config)
    doc = run_experiment(cfg)
    emit_reports(doc, args.out)
    _summarize(doc)
    return EXIT_OK


def cmd_theory(args):
    if args.check == "t1":
        mcfg = MarginModelConfig(trials=args.trials or MarginModelConfig.trials, seed=args.seed)
        records = simulate_margin_model(mcfg)
        res = check_theorem1_monotonicity(records)
        doc = {"check": "t1", "config": asdict(mcfg), "spearman": asdict(res),
               "monotone_sweep": sweep_is_monotone(records), "records": [asdict(r) for r in records],
               "passed": bool(res.passed)}
    elif args.check == "t2":
        reports = run_bound_suite(args.configs, args.trials or 10_000, args.seed)
        n_pass = sum(r.passed for r in reports)
        doc = {"check": "t2", "seed": args.seed, "n_configs": len(reports), "n_passed": n_pass,
               "passed": n_pass == len(reports), "reports": [asdict(r) for r in reports]}
    else:
        cfg = _load_config(args.config)
        doc = {"check": "corollary", **corollary_check(cfg.seeds, cfg)}
    path = _write_json(Path(args.out) / f"theory_{args.check}.json", doc)
    print(f"{args.check}: {'PASS' if doc['passed'] else 'FAIL'} -> {path}")
    return EXIT_OK if doc["passed"] else EXIT_ACCEPTANCE


def cmd_gradcheck(args):
    doc = dual_gradcheck(seed=args.seed)
    if args.out:
        _write_json(args.out, doc)
    print(f"max relative error {doc['max_rel_error']:.3e} over {doc['n_parameters']} parameters "
          f"(tolerance {doc['tolerance']:g}): {'PASS' if doc['passed'] else 'FAIL'}")
    return EXIT_OK if doc["passed"] else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualtta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train the reference network on the source split")
    s.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, help="override the first config seed")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="stream one method over one scenario")
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--scenario", default="mild", choices=SCENARIOS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="experiment config supplying dataset and adapter settings")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("bench", help="run the methods x seeds grid and write results.{json,csv}")
    s.add_argument("--config", help="experiment config (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("theory", help="Monte Carlo checks of the margin model and flip bounds")
    s.add_argument("--check", required=True, choices=("t1", "t2", "corollary"))
    s.add_argument("--trials", type=int, help="Monte Carlo draws per configuration")
    s.add_argument("--configs", type=int, default=200, help="random configurations for t2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="experiment config for the corollary run")
    s.add_argument("--out", default=".", help="output directory for theory_<check>.json")
    s.set_defaults(func=cmd_theory)

    s = sub.add_parser("gradcheck", help="finite-difference check of the dual loss gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="optional JSON report path")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, NumericOverflowError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
