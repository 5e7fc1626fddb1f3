"""Command-line pipeline: train, predict, eval, simulate-batches.

Every RunConfig key is available as a ``--key-name`` flag on every command;
values can also come from a ``--config`` key=value file, with command-line
flags winning.  Exit codes: 0 success, 1 runtime abort (training/numeric
failures), 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .batching import BATCH_STATS_HEADER, batch_stats
from .config import (FIELD_HELP, RunConfig, _int_list, build_config,
                     parse_config_file)
from .data import Dataset, Vocabulary, featurize_all, load_dataset
from .errors import (ConfigError, DatasetFormatError, DegenerateEmbeddingError,
                     TrainingAbort, XmcliteError)
from .infer import build_index, predict, read_predictions, write_predictions
from .metrics import metrics_report, propensity
from .model import forward, init_params, load_checkpoint
from .negatives import mine_hard_negatives
from .train import train


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="key=value config file (flags override it)")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, metavar=f.name.upper(),
                            default=argparse.SUPPRESS,
                            help=f"{FIELD_HELP[f.name]} "
                                 f"(default: {getattr(defaults, f.name)!r})")


def _resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set]:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if hasattr(args, f.name)}
    return build_config(file_values, overrides)


def _require(config: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(config, key):
            raise ConfigError(f"{key} is required")


def _load(config: RunConfig, queries_path: str, vocab: Vocabulary) -> Dataset:
    return load_dataset(queries_path, config.labels_path,
                        format=config.data_format, vocab=vocab)


def _out_path(config: RunConfig, explicit: str, default_name: str) -> str:
    if explicit:
        return explicit
    os.makedirs(config.out_dir, exist_ok=True)
    return os.path.join(config.out_dir, default_name)


def cmd_train(config: RunConfig, explicit: set) -> int:
    _require(config, "queries_path", "labels_path")
    vocab = Vocabulary(config.hash_dim)
    dataset = _load(config, config.queries_path, vocab)
    eval_dataset = (_load(config, config.eval_queries_path, vocab)
                    if config.eval_queries_path else None)
    log_path = _out_path(config, config.log_path, "train_log.jsonl")
    ckpt_path = _out_path(config, config.checkpoint_path, "checkpoint.bin")
    params, report = train(dataset, config.train_config(), log_path=log_path,
                           checkpoint_path=ckpt_path, eval_dataset=eval_dataset)
    last = report.records[-1]
    print(f"trained {config.epochs} epochs in {report.wall_seconds:.1f}s; "
          f"final loss {last['total']:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    if report.final_metrics:
        print(json.dumps(report.final_metrics, sort_keys=True))
    return 0


def _checked_params(config: RunConfig, explicit: set):
    _require(config, "checkpoint_path")
    params, sidecar = load_checkpoint(config.checkpoint_path)
    for key, value in (("hash_dim", params.hash_dim),
                       ("encoder_dim", params.encoder_dim),
                       ("search_dim", params.search_dim)):
        if key in explicit and getattr(config, key) != value:
            raise ConfigError(
                f"{key}={getattr(config, key)} conflicts with checkpoint "
                f"({key}={value})")
    return params, sidecar


def cmd_predict(config: RunConfig, explicit: set) -> int:
    _require(config, "queries_path", "labels_path")
    params, _ = _checked_params(config, explicit)
    vocab = Vocabulary(params.hash_dim)
    query_file = config.eval_queries_path or config.queries_path
    dataset = _load(config, query_file, vocab)
    if dataset.num_labels != params.num_labels:
        raise ConfigError(
            f"dataset has {dataset.num_labels} labels but checkpoint was "
            f"trained with {params.num_labels}")
    index = build_index(params, dataset, config.mode,
                        exact=config.search == "exact", hnsw_seed=config.seed)
    results = predict(index, params, dataset.instance_texts, vocab,
                      config.top_k)
    out = _out_path(config, config.predictions_path, "predictions.tsv")
    write_predictions(out, results)
    print(f"wrote {sum(len(r[0]) for r in results)} rows for "
          f"{len(results)} queries to {out}")
    return 0


def cmd_eval(config: RunConfig, explicit: set) -> int:
    _require(config, "queries_path", "labels_path", "predictions_path")
    vocab = Vocabulary(config.hash_dim)
    train_ds = _load(config, config.queries_path, vocab)
    eval_ds = (_load(config, config.eval_queries_path, vocab)
               if config.eval_queries_path else train_ds)
    by_query = read_predictions(config.predictions_path)
    for qid in by_query:
        if qid < 0 or qid >= eval_ds.num_instances:
            raise ConfigError(
                f"{config.predictions_path}: query id {qid} outside the "
                f"evaluated dataset (N={eval_ds.num_instances})")
    ranked = [np.asarray([lab for lab, _ in by_query.get(i, [])], dtype=np.int64)
              for i in range(eval_ds.num_instances)]
    props = propensity(train_ds.label_frequencies, train_ds.num_instances,
                       config.propensity_a, config.propensity_b)
    report = metrics_report(ranked, eval_ds.positive_sets(), props,
                            config.eval_k_list())
    out = _out_path(config, config.metrics_path, "metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_simulate_batches(config: RunConfig, explicit: set) -> int:
    _require(config, "queries_path", "labels_path")
    if config.checkpoint_path:
        params, _ = _checked_params(config, explicit)
    else:
        params = init_params(config.hash_dim, config.encoder_dim,
                             config.search_dim, 1, config.seed, config.dropout)
    vocab = Vocabulary(params.hash_dim)
    dataset = _load(config, config.queries_path, vocab)
    q_emb = forward(params, featurize_all(dataset.instance_texts, vocab),
                    mode="eval", heads=("de",)).de_out
    l_emb = forward(params, featurize_all(dataset.label_texts, vocab),
                    mode="eval", heads=("de",)).de_out
    num_batches = max(1, -(-dataset.num_instances // config.batch_size))
    lines = [BATCH_STATS_HEADER]
    for pos_cap in _int_list(config.sim_positive_caps, "sim_positive_caps"):
        for neg_cap in _int_list(config.sim_negative_caps,
                                 "sim_negative_caps"):
            cache = None
            if neg_cap > 0:
                size = config.cache_size or neg_cap * config.refresh_interval
                cache = mine_hard_negatives(q_emb, l_emb,
                                            dataset.positive_sets(), size,
                                            method=config.mining)
            stats = batch_stats(dataset, q_emb, pos_cap, neg_cap, num_batches,
                                config.seed, cache=cache)
            lines.append(stats.csv_row())
    out = _out_path(config, "", "batch_stats.csv")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


_COMMANDS = {
    "train": (cmd_train, "train a model and write checkpoint + log"),
    "predict": (cmd_predict, "rank labels for queries with a checkpoint"),
    "eval": (cmd_eval, "score a predictions file against ground truth"),
    "simulate-batches": (cmd_simulate_batches,
                         "report batch label-pool statistics"),
}


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="xmclite",
        description="Desk-scale extreme multi-label classification engine.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        cmd_parser = sub.add_parser(name, help=help_text)
        _add_config_flags(cmd_parser)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; pass both through
        return int(exc.code) if exc.code is not None else 0

    try:
        config, explicit = _resolve_config(args)
        return _COMMANDS[args.command][0](config, explicit)
    except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAbort, DegenerateEmbeddingError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    except XmcliteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
