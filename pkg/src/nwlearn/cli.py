"""Command-line interface.

Subcommands: gen-data, train, eval, neighbors, sweep, summarize. Flat
``key = value`` config files feed every run; CLI flags override file
values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import NwError
from .experiment import (
    ExperimentConfig,
    aggregate_records,
    config_from_flat_dict,
    load_experiment_data,
    parse_config_file,
    parse_mode,
    run_experiment,
    run_prevalence_sweep,
)
from .infer import build_cache, dump_neighbors, predict, train_probe
from .io import load_checkpoint, load_csv, save_csv
from .metrics import compute_metric
from .rng import Rng

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3


def _build_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key, attr in (("seed", "seed"), ("out_dir", "out")):
        if getattr(args, attr, None) is not None:
            values[key] = str(getattr(args, attr))
    for key in ("variant", "metric", "modes", "n_seeds", "max_epochs", "data", "flip_ood"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            values[key] = str(value)
    return config_from_flat_dict(values)


def _cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds, test_ds = load_experiment_data(cfg)
    for name, ds in (("train", train_ds), ("val", val_ds), ("test", test_ds)):
        path = out / f"{name}.csv"
        save_csv(ds, path)
        print(f"wrote {path} ({len(ds)} examples, {ds.n_classes} classes, envs {ds.env_ids})")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    result = run_experiment(cfg)
    _print_aggregate(cfg, result.aggregate)
    if result.failures:
        for failure in result.failures:
            print(f"seed {failure['seed']} FAILED: {failure['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_eval_data(args, cfg):
    if args.data_csv:
        train_ds = load_csv(Path(args.data_csv) / "train.csv")
        test_ds = load_csv(Path(args.data_csv) / "test.csv")
        return train_ds, test_ds
    train_ds, _, test_ds = load_experiment_data(cfg)
    return train_ds, test_ds


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    net, probe, metadata = load_checkpoint(args.checkpoint)
    train_ds, test_ds = _load_eval_data(args, cfg)
    cache = build_cache(net, train_ds)
    query_feats = net.extract(test_ds.X).data
    print(f"checkpoint metadata: {json.dumps(metadata, sort_keys=True)}")
    for label in cfg.modes:
        mode = parse_mode(label)
        head = probe if mode.kind == "probe" and probe is not None else None
        if mode.kind == "probe" and head is None:
            head = train_probe(cache)
        probs = predict(mode, cache, query_feats, rng=Rng(cfg.data_seed), probe=head)
        value = compute_metric(probs, test_ds.y, test_ds.e, cfg.metric)
        print(f"{label:>12}: {cfg.metric} = {value:.4f}  (n={len(test_ds)})")
    return EXIT_OK


def _cmd_neighbors(args) -> int:
    cfg = _build_config(args)
    net, _, _ = load_checkpoint(args.checkpoint)
    train_ds, test_ds = _load_eval_data(args, cfg)
    cache = build_cache(net, train_ds)
    query_feats = net.extract(test_ds.X).data
    neighbors, histogram = dump_neighbors(cache, query_feats, args.top_k)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "neighbors.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for qi, entry in enumerate(neighbors):
            fh.write(json.dumps({
                "query": qi,
                "query_label": int(test_ds.y[qi]),
                "neighbors": [
                    {"index": i, "distance": d, "label": lab, "env": env}
                    for i, d, lab, env in entry
                ],
            }) + "\n")
    print(f"wrote {path}")
    print("environment histogram of the top-%d neighbors (averaged over %d queries):"
          % (args.top_k, len(neighbors)))
    for env, share in sorted(histogram.items()):
        print(f"  env {env}: {share:.3f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    if args.prevalences:
        prevalences = tuple(float(p) for p in args.prevalences.split(","))
    else:
        prevalences = (0.15, 0.3, 0.5, 0.7, 0.85)
    result = run_prevalence_sweep(cfg, prevalences=prevalences)
    print(f"{'point':>24}  {'mean':>8}  {'std':>8}  seeds")
    for mode, stats in result.aggregate.items():
        print(f"{mode:>24}  {stats['mean']:8.4f}  {stats['std']:8.4f}  {stats['n_seeds']}")
    if result.failures:
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_summarize(args) -> int:
    records = []
    root = Path(args.dir)
    for path in sorted(root.glob("**/*.jsonl")):
        if path.name in ("metrics.jsonl", "sweep.jsonl"):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        records.append(json.loads(line))
    if not records:
        print(f"no metrics records under {root}", file=sys.stderr)
        return EXIT_ERROR
    aggregate = aggregate_records(records)
    metric_names = sorted({r["metric_name"] for r in records})
    print(f"{len(records)} records, metrics {metric_names}")
    print(f"{'mode':>24}  {'mean':>8}  {'std':>8}  seeds")
    for mode, stats in aggregate.items():
        print(f"{mode:>24}  {stats['mean']:8.4f}  {stats['std']:8.4f}  {stats['n_seeds']}")
    return EXIT_OK


def _print_aggregate(cfg, aggregate):
    print(f"variant {cfg.train.variant}, metric {cfg.metric}, {cfg.n_seeds} seed(s)")
    print(f"{'mode':>12}  {'mean':>8}  {'std':>8}")
    for mode, stats in aggregate.items():
        print(f"{mode:>12}  {stats['mean']:8.4f}  {stats['std']:8.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="base training seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="nwlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate benchmark CSVs")
    p.add_argument("--data", choices=("spurious", "imbalanced"))
    p.add_argument("--flip-ood", dest="flip_ood", choices=("true", "false"))
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train + evaluate across seeds")
    p.add_argument("--variant")
    p.add_argument("--metric")
    p.add_argument("--modes", help="comma-separated inference modes, e.g. full,cluster,knn:20")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-csv", dest="data_csv", help="directory with train.csv/test.csv")
    p.add_argument("--modes")
    p.add_argument("--metric")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("neighbors", parents=[common], help="dump nearest neighbors + env histogram")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-csv", dest="data_csv")
    p.add_argument("--top-k", dest="top_k", type=int, default=20)
    p.set_defaults(fn=_cmd_neighbors)

    p = sub.add_parser("sweep", parents=[common], help="class-prevalence robustness sweep")
    p.add_argument("--prevalences", help="comma-separated target prevalences")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("summarize", parents=[common], help="aggregate metrics records")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=_cmd_summarize)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
