"""Command line interface: convert, train, evaluate, embed, analyze.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, ParseError, ProtocloudError, UsageError
from .graphdata import TASKS, Dataset, SplitSpec, load_jsonl, save_jsonl, split
from .metrics import correlation_analysis
from .smiles import smiles_to_graph
from .trainer import (
    TrainConfig,
    embed,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_smiles_csv(path, task):
    """Parse a ``smiles,label`` CSV; returns (dataset, failing line numbers)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"smiles", "label"} - set(reader.fieldnames or ())
        if missing:
            raise UsageError(f"{path}: missing column(s) {sorted(missing)}")
        graphs, failures = [], []
        for k, row in enumerate(reader):
            line = k + 2
            try:
                label = float(row["label"])
                if task == "classification" and label not in (0.0, 1.0):
                    raise ValueError("classification label must be 0 or 1")
                g = smiles_to_graph(row["smiles"], label)
            except (ParseError, ValueError, TypeError):
                failures.append(line)
                continue
            g.id = str(k)
            graphs.append(g)
    return Dataset(graphs, task=task), failures


def cmd_convert(args):
    ds, failures = read_smiles_csv(args.input, args.task)
    save_jsonl(ds, args.out)
    print(f"converted {len(ds)} molecules, {len(failures)} parse failure(s)", file=sys.stderr)
    if failures:
        print("failing lines: " + " ".join(map(str, failures)), file=sys.stderr)


def _load_config(path, run_seed):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if run_seed is not None:
        data["seed"] = run_seed
    return TrainConfig.from_dict(data)


def _metrics_document(report, config):
    return {
        "task": report["task"],
        "metric_name": report["metric_name"],
        "value": report["value"],
        "n_test": report["n"],
        "config_digest": config.digest(),
    }


def cmd_train(args):
    config = _load_config(args.config, args.run_seed)
    ds = load_jsonl(args.data)
    train_ds, valid_ds, test_ds = split(ds, SplitSpec(seed=args.split_seed))
    os.makedirs(args.out, exist_ok=True)
    result = train(config, train_ds, valid_ds)
    save_checkpoint(result.model, os.path.join(args.out, "checkpoint.json"))
    with open(os.path.join(args.out, "history.jsonl"), "w", encoding="utf-8") as fh:
        for row in result.history:
            fh.write(json.dumps(row) + "\n")
    metrics = _metrics_document(evaluate(result.model, test_ds), config)
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    print(json.dumps(metrics))


def cmd_evaluate(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_jsonl(args.data, task=model.task)
    print(json.dumps(_metrics_document(evaluate(model, ds), model.config)))


def cmd_embed(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_jsonl(args.data, task=model.task)
    if args.dump_plans and not model.config.head_kind.uses_transport:
        raise UsageError(f"head {model.config.head} solves no transport plans")
    E, plans = embed(model, ds, with_plans=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"r_{k + 1}" for k in range(E.shape[1])])
        for g, row in zip(ds.graphs, E):
            writer.writerow([g.id] + [repr(float(x)) for x in row])
    if args.dump_plans:
        doc = [{"id": g.id, "plans": p.tolist()} for g, p in zip(ds.graphs, plans)]
        with open(args.dump_plans, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)


def read_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise UsageError(f"{path}: expected a header starting with 'id'")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def cmd_analyze(args):
    ids, E = read_embeddings(args.embeddings)
    ds = load_jsonl(args.data)
    labels = {g.id: g.label for g in ds.graphs}
    unknown = [i for i in ids if i not in labels]
    if unknown:
        raise UsageError(f"embedding ids not found in {args.data}: {unknown[:5]}")
    rho, r = correlation_analysis(E, [labels[i] for i in ids])
    print(json.dumps({"spearman": rho, "pearson": r}))


def build_parser():
    parser = _Parser(prog="protocloud", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="SMILES CSV to JSONL graphs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=TASKS, default="regression")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train one model on a random split")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--run-seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="task metric of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="export graph representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-plans", default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("analyze", help="distance vs label-gap correlations")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocloudError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
