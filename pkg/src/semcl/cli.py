"""Command-line interface.

Verbs: run, compare, sweep, gen-embeddings-fallback, analyze-drift.
Failures exit nonzero with a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

import numpy as np

from . import metrics, supervision
from .runner import (ComparisonError, ConfigError, ExperimentConfig, RunRecord,
                     compare, run_experiment, save_comparison, sweep)
from .taskstream import load_dataset


def _fail(code, message, **extra):
    payload = {"error": code, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 1


def _load_record(path) -> RunRecord:
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    config = ExperimentConfig.from_dict(manifest["config"])
    record = run_experiment(config, resume=True)  # resume = load from disk
    return record


def cmd_run(args):
    config = ExperimentConfig.load(args.config)
    record = run_experiment(config, resume=not args.no_resume)
    out = {"fingerprint": record.fingerprint,
           "output_dir": os.path.join(config["output_dir"], record.fingerprint),
           "seeds_completed": sorted(record.seed_results),
           "seeds_failed": {str(k): v for k, v in record.failures.items()},
           "metrics": record.metric_means()}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 2 if record.failures and not record.seed_results else 0


def cmd_compare(args):
    records = [_load_record(p) for p in args.records]
    rows = compare(records, baseline=args.baseline)
    save_comparison(rows, csv_path=args.csv, json_path=args.json_out)
    print(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args):
    config = ExperimentConfig.load(args.config)
    values = None
    if args.values:
        values = [int(v) for v in args.values.split(",")]
    records = sweep(config, args.axis, values=values)
    out = {str(v): {"fingerprint": r.fingerprint,
                    "metrics": r.metric_means()}
           for v, r in records.items()}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


_NAME_RE = re.compile(r"^super(\d+)_class(\d+)$")


def cmd_gen_embeddings_fallback(args):
    ds = load_dataset(args.dataset)
    names = ds.class_names
    superclass_of = None
    if args.mode == "hierarchy":
        superclass_of = []
        for name in names:
            m = _NAME_RE.match(name)
            if not m:
                return _fail("hierarchy_names",
                             f"class name {name!r} is not super<i>_class<j>; "
                             "use --mode hash")
            superclass_of.append(int(m.group(1)))
    table = supervision.fallback_targets(names, args.dim, args.seed,
                                         mode=args.mode,
                                         superclass_of=superclass_of,
                                         alpha=args.alpha)
    table.save(args.output)
    print(json.dumps({"classes": len(names), "dim": args.dim,
                      "mode": args.mode, "output": args.output}))
    return 0


def cmd_analyze_drift(args):
    manifest_path = os.path.join(args.record, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    data = manifest["config"]
    data["analyses"]["drift"] = True
    data["analyses"]["drift_k"] = args.k
    config = ExperimentConfig.from_dict(data)
    record = run_experiment(config)
    per_stage = {}
    for res in record.seed_results.values():
        if "drift" not in res:
            continue
        for stage, dr in zip(res["drift"].stages, res["drift"].drifts):
            per_stage.setdefault(stage, []).append(dr)
    out = {"fingerprint": record.fingerprint, "k": args.k,
           "mean_drift_by_stage": {str(s): float(np.mean(v))
                                   for s, v in sorted(per_stage.items())}}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="semcl",
        description="Continual-learning experiments with language-guided "
                    "frozen classifier supervision")
    sub = p.add_subparsers(dest="verb", required=True)

    q = sub.add_parser("run", help="run an experiment config")
    q.add_argument("config")
    q.add_argument("--no-resume", action="store_true",
                   help="recompute even if per-seed outputs exist")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("compare", help="compare run records")
    q.add_argument("records", nargs="+",
                   help="record directories (<outdir>/<fingerprint>)")
    q.add_argument("--baseline", default=None)
    q.add_argument("--csv", default=None)
    q.add_argument("--json-out", default=None)
    q.set_defaults(func=cmd_compare)

    q = sub.add_parser("sweep", help="run a config across an axis")
    q.add_argument("config")
    q.add_argument("--axis", required=True,
                   choices=["exemplars_per_class", "K", "B"])
    q.add_argument("--values", default=None,
                   help="comma-separated axis values")
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("gen-embeddings-fallback",
                       help="derive semantic targets without a language model")
    q.add_argument("dataset", help="dataset file (taskstream text format)")
    q.add_argument("--mode", choices=["hierarchy", "hash"], default="hierarchy")
    q.add_argument("--dim", type=int, default=32)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--alpha", type=float, default=0.5)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_gen_embeddings_fallback)

    q = sub.add_parser("analyze-drift",
                       help="recompute representation drift for a record")
    q.add_argument("record", help="record directory")
    q.add_argument("--k", type=int, default=10)
    q.set_defaults(func=cmd_analyze_drift)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ComparisonError) as e:
        return _fail("config", str(e))
    except FileNotFoundError as e:
        return _fail("not_found", str(e))
    except (ValueError, KeyError, OSError) as e:
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
