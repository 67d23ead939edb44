"""Command line entry point: ``npsfuzz run|replay|eval-model|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, coverage, mleval
from .engine import MODES, read_corpus_dir
from .errors import ConfigError
from .smoothing import CoverageModel, encode_batch
from .target import builtin_targets, execute, get_target

log = logging.getLogger("npsfuzz")


def _campaign_config(args) -> bench.CampaignConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read campaign config {args.config}: {exc}") from exc
    overrides = {
        "target": args.target, "variants": args.variants, "trials": args.trials, "base_seed": args.seed,
        "budget": args.budget, "overhead_per_exec": args.overhead, "output_dir": args.out,
        "workers": args.workers, "hidden": args.hidden, "epochs": args.epochs, "min_corpus": args.min_corpus,
        "interval_scale": args.interval_scale, "num_seeds": args.num_seeds, "seeds_dir": args.seeds,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if "target" not in d:
        raise ConfigError("a target is required (--target or config file)")
    if not d.get("output_dir"):
        d["output_dir"] = str(bench.output_root() / d["target"])
    return bench.CampaignConfig.from_dict(d)


def cmd_run(args):
    config = _campaign_config(args)
    report = bench.run_campaign(config)
    out = Path(config.output_dir)
    bench.emit_reports(report, out / "reports")
    for variant, c in report.coverage.items():
        print(f"{variant:12s} edges {c['mean']:.2f} +- {c['std']:.2f} over {c['n']} trials")
    print(f"artifacts in {out}")


def cmd_replay(args):
    target = get_target(args.target)
    corpus = read_corpus_dir(args.corpus)
    edges, count = coverage.replay_coverage(corpus, target)
    print(json.dumps({"target": target.name, "metric": coverage.METRIC_ID, "entries": len(corpus),
                      "edges": sorted(edges), "count": count}, sort_keys=True))


def cmd_eval_model(args):
    target = get_target(args.target)
    model = CoverageModel.load(args.checkpoint)
    corpus = read_corpus_dir(args.corpus)
    if not corpus:
        raise ConfigError(f"{args.corpus} is empty")
    hit = [execute(target, c.data).edges_hit for c in corpus]
    # label each model column by whether any of its merged edges was hit
    labels = [[int(bool(set(group) & h)) for group in model.edge_index] for h in hit]
    full = coverage.bitmap_from_edge_sets(hit, [c.id for c in corpus])
    metrics = mleval.evaluate(model, encode_batch([c.data for c in corpus], model.input_len), labels,
                              args.threshold)
    table = mleval.metrics_table_csv([{"target": target.name,
                                       "covered_edges_pct": 100 * coverage.imbalance(full),
                                       "metrics": metrics}])
    if args.csv:
        Path(args.csv).write_text(table)
    sys.stdout.write(table)


def cmd_report(args):
    _, report = bench.load_campaign(args.artifacts)
    out = Path(args.out) if args.out else Path(args.artifacts) / "reports"
    for path in bench.emit_reports(report, out):
        print(path)


def cmd_targets(args):
    for t in builtin_targets():
        print(f"{t.name}\tedges={t.num_edges}\tmax_input_len={t.max_input_len}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npsfuzz", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a seeded multi-trial campaign")
    r.add_argument("--config", help="JSON campaign config; flags override its fields")
    r.add_argument("--target")
    r.add_argument("--variants", nargs="+", choices=MODES)
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int, help="base rng seed; trial i uses seed+i")
    r.add_argument("--budget", type=float, help="virtual-time budget per trial")
    r.add_argument("--overhead", type=float, help="extra virtual time per execution")
    r.add_argument("--out", help=f"output directory (default ${bench.OUTPUT_ROOT_ENV}/<target>)")
    r.add_argument("--workers", type=int)
    r.add_argument("--hidden", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--min-corpus", type=int)
    r.add_argument("--interval-scale", type=float, help="scales the 3600-unit minimum retrain interval")
    r.add_argument("--num-seeds", type=int)
    r.add_argument("--seeds", help="directory of initial seed files")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("replay", help="replay a corpus directory and print its edge coverage")
    r.add_argument("--target", required=True)
    r.add_argument("corpus")
    r.set_defaults(func=cmd_replay)

    r = sub.add_parser("eval-model", help="per-edge metrics of a model checkpoint on a corpus")
    r.add_argument("--target", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.add_argument("--csv")
    r.add_argument("corpus")
    r.set_defaults(func=cmd_eval_model)

    r = sub.add_parser("report", help="rebuild tables and plots from stored campaign artifacts")
    r.add_argument("artifacts")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    r = sub.add_parser("targets", help="list registered targets")
    r.set_defaults(func=cmd_targets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
