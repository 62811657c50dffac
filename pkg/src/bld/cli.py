"""Command-line driver.

Subcommands: `run <config>` trains and evaluates one method, `audit
[<config>] [--benchmarks]` prints memory reports without training, `tables
<records...>` aggregates machine-readable run records into one comparison
table, `gradcheck` runs the finite-difference gradient suite.

Exit codes: 0 success, 2 config error, 3 constraint violation detected by
the audit, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import audit, gradcheck, harness
from .errors import ConfigError, ConstraintViolationError, NumericError
from .model import MultiHeadNet


def _cmd_run(args):
    config = harness.parse_config(args.config)
    aggregate = harness.run_experiment(config)
    table = harness.render_accuracy_table([aggregate])
    if config.output:
        os.makedirs(config.output, exist_ok=True)
        harness.write_records(harness.metrics_records(aggregate), os.path.join(config.output, "records.jsonl"))
        with open(os.path.join(config.output, "table.txt"), "w") as f:
            f.write(table + "\n")
    print(table)


def _cmd_audit(args):
    if args.benchmarks:
        for name, reports in audit.benchmark_overhead_tables().items():
            print(audit.render_overhead_table(reports, title=name))
            print()
        return
    if not args.config:
        raise ConfigError("audit needs a config file or --benchmarks")
    config = harness.parse_config(args.config)
    train, _, splits = harness.load_experiment_data(config)
    net = MultiHeadNet.build(train.images.shape[1], config.hidden, config.precision)
    rng = np.random.default_rng(0)
    for spec in splits:
        net.spawn_head(spec.class_ids, rng, spec.task_index)
    report = audit.method_overhead(config.method, harness.overhead_shape_for_run(config, net, splits))
    print(audit.render_overhead_table([report]))
    print(json.dumps(report.as_dict(), sort_keys=True))


def _cmd_tables(args):
    records = harness.read_records(args.records)
    if not records:
        raise ConfigError("no records found")
    aggregates = harness.aggregates_from_records(records)
    print(harness.render_accuracy_table(aggregates))


def _cmd_gradcheck(args):
    results = gradcheck.run_gradient_checks(seed=args.seed)
    ok = True
    for name, err in results.items():
        status = "ok" if err < gradcheck.REL_TOLERANCE else "FAIL"
        ok = ok and err < gradcheck.REL_TOLERANCE
        print(f"{name:<16} max relative error {err:.3e}  [{status}]")
    if not ok:
        raise NumericError("analytic gradients disagree with finite differences")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="bld", description="Batch-level distillation experiment driver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one method")
    p_run.add_argument("config")

    p_audit = sub.add_parser("audit", help="memory report without training")
    p_audit.add_argument("config", nargs="?")
    p_audit.add_argument("--benchmarks", action="store_true", help="print the built-in benchmark overhead tables")

    p_tables = sub.add_parser("tables", help="aggregate run records into one table")
    p_tables.add_argument("records", nargs="+")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            _cmd_run(args)
        elif args.command == "audit":
            _cmd_audit(args)
        elif args.command == "tables":
            _cmd_tables(args)
        else:
            _cmd_gradcheck(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ConstraintViolationError as e:
        print(f"constraint violation: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
