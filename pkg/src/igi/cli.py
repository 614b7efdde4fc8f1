"""Command-line front end: generate / train / eval / experiment / embed / selftest.

Flags are generated from the config dataclasses, so `--help` always
lists every tunable with its real default.  Precedence per option is
flag > config file > IGI_SEED (seed only) > schema default.  Exit codes:
0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

from . import canonjson
from .evalsuite import evaluate, infer_nodes, model_scores, node_outputs
from .experiments import load_plan, run_experiment
from .graphdata import DatasetError, load_dataset, make_split, save_dataset
from .losses import LossConfig, save_report, train
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .selftest import run_selftest
from .synthgen import ConfigError, SynthConfig, gen_dataset

CASE_TOKENS = {"orig": "original-nodes", "new-nodes": "new-nodes",
               "new-graphs": "new-graphs"}
METRIC_NAMES = ("nmi", "ari", "acc", "f1", "pre")

# CLI spelling of dataclass fields that have a shorter canonical flag.
RENAMES = {"enhance_mode": "enhance", "learning_rate": "lr"}


def _parse_pair(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return tuple(float(p) for p in parts)


def _fmt_default(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def schema_fields(cls, skip=()) -> list:
    """(field, flag, parser, default) for every exposed config field."""
    out = []
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if default is dataclasses.MISSING:
            default = f.default_factory()
        if isinstance(default, tuple):
            parse = _parse_pair
        elif isinstance(default, int):
            parse = int
        elif isinstance(default, float):
            parse = float
        else:
            parse = str
        out.append((f.name, RENAMES.get(f.name, f.name).replace("_", "-"),
                    parse, default))
    return out


def add_schema_flags(parser, cls, skip=()) -> list:
    fields = schema_fields(cls, skip)
    for name, flag, parse, default in fields:
        parser.add_argument(f"--{flag}", dest=name, type=parse, default=None,
                            metavar="V",
                            help=f"{name.replace('_', ' ')} (default: {_fmt_default(default)})")
    return [name for name, *_ in fields]


def merge_config(cls, args, names, file_obj=None):
    """flags > file > IGI_SEED > defaults, validated by the dataclass."""
    obj = dict(file_obj or {})
    for name in names:
        value = getattr(args, name)
        if value is not None:
            obj[name] = value
    if "seed" not in obj and any(f.name == "seed" for f in dataclasses.fields(cls)):
        env = os.environ.get("IGI_SEED")
        if env is not None:
            try:
                obj["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"IGI_SEED must be an integer, got {env!r}")
    return cls.from_obj(obj)


def _load_config_file(path) -> dict:
    raw = canonjson.load_path(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def _split_config_file(raw: dict, path) -> tuple:
    """Partition a flat train config file into model and loss keys."""
    model_names = {f.name for f in dataclasses.fields(ModelConfig)}
    loss_names = {f.name for f in dataclasses.fields(LossConfig)}
    model_obj, loss_obj = {}, {}
    for key, value in raw.items():
        if key in model_names:
            model_obj[key] = value
        elif key in loss_names:
            loss_obj[key] = value
        else:
            raise ConfigError(f"config file {path}: unknown key {key!r}")
    return model_obj, loss_obj


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    file_obj = _load_config_file(args.config) if args.config else None
    cfg = merge_config(SynthConfig, args, args._synth_fields, file_obj)
    ds = gen_dataset(cfg, hier=not args.no_hier)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.num_graphs} graphs, "
          f"{sum(len(g.uids) for g in ds.graphs)} nodes")
    return 0


MODEL_SKIP = ("feature_dim", "class_count", "hier_mode")


def cmd_train(args) -> int:
    model_obj, loss_obj = ({}, {})
    if args.config:
        model_obj, loss_obj = _split_config_file(_load_config_file(args.config),
                                                 args.config)
    ds = load_dataset(args.data)
    model_obj["feature_dim"] = ds.feature_dim
    model_obj["class_count"] = ds.class_count
    model_obj["hier_mode"] = "hierarchical" if args.hier == "on" else "single"
    model_cfg = merge_config(ModelConfig, args, args._model_fields, model_obj)
    loss_cfg = merge_config(LossConfig, args, args._loss_fields, loss_obj)
    split = make_split(ds, CASE_TOKENS[args.case], args.fraction, loss_cfg.seed)
    report = train(ds, split, model_cfg, loss_cfg,
                   log=print if args.verbose else None)
    save_checkpoint(report.params, model_cfg, args.out)
    print(f"wrote {args.out}: final loss {report.loss[-1]:.6f} "
          f"after {loss_cfg.epochs} epochs")
    if args.report:
        save_report(report, args.report)
        print(f"wrote {args.report}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    params, model_cfg = load_checkpoint(args.ckpt)
    split = make_split(ds, CASE_TOKENS[args.case], args.fraction, args.seed)
    assignment = infer_nodes(ds, params, model_cfg, split)
    scores = model_scores(ds, params, model_cfg, split)
    metrics = evaluate(ds, split, assignment, scores).scaled()
    wanted = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(METRIC_NAMES)
    unknown = sorted(set(wanted) - set(METRIC_NAMES))
    if unknown:
        raise ConfigError(f"unknown metrics: {', '.join(unknown)}")
    report = {
        "case": CASE_TOKENS[args.case],
        "fraction": args.fraction,
        "seed": args.seed,
        "scope_nodes": sum(len(nodes) for nodes in assignment.graph_nodes),
        "metrics": {m: metrics[m] for m in wanted},
    }
    text = canonjson.dumps(report)
    print(text)
    if args.out:
        canonjson.dump_path(report, args.out)
    return 0


def cmd_embed(args) -> int:
    ds = load_dataset(args.data)
    params, model_cfg = load_checkpoint(args.ckpt)
    split = make_split(ds, "original-nodes", 0.0, seed=0)
    assignment = infer_nodes(ds, params, model_cfg, split)
    outputs = node_outputs(ds, params, model_cfg)
    dim = outputs.embed.shape[1]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["graph-index", "node-index", "z", "zhat"]
                        + [f"v{j + 1}" for j in range(dim)])
        row = 0
        for g_idx, graph in enumerate(ds.graphs):
            labels = dict(zip(assignment.graph_nodes[g_idx],
                              assignment.labels[g_idx]))
            for n_idx in range(len(graph.uids)):
                vec = outputs.embed[row]
                writer.writerow([g_idx, n_idx, int(graph.z[n_idx]),
                                 int(labels[n_idx])]
                                + [f"{x:.10g}" for x in vec])
                row += 1
    print(f"wrote {args.out}: {row} nodes, {dim}-dim embeddings")
    return 0


def cmd_experiment(args) -> int:
    plan = load_plan(args.plan)

    def log(rec):
        state = f"failed: {rec.error}" if rec.error else "ok"
        print(f"{rec.variant}/{rec.case}/{rec.mode} seed={rec.seed} {state}")

    table = run_experiment(plan, out_dir=args.out, jobs=args.jobs,
                           log=log if args.verbose else None)
    failures = sum(cell.failures for cell in table.cells)
    print(f"wrote {args.out}: {len(table.cells)} cells, "
          f"{len(table.records)} runs, {failures} failed")
    return 1 if failures else 0


def cmd_selftest(args) -> int:
    return run_selftest(seed=args.seed)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="igi",
        description="Inverse graph identification: benchmark generation, "
                    "training, evaluation, and experiment grids.")
    sub = parser.add_subparsers(dest="command", required=True)
    env_seed = os.environ.get("IGI_SEED")
    seed_note = f"IGI_SEED={env_seed}" if env_seed is not None else "0"

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--config", metavar="JSON", help="config file with SynthConfig keys")
    p.add_argument("--out", required=True, metavar="PATH", help="output dataset JSON")
    p.add_argument("--no-hier", action="store_true",
                   help="omit the graph-level relation (identity only)")
    p.set_defaults(fn=cmd_generate, _synth_fields=add_schema_flags(p, SynthConfig))

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--data", required=True, metavar="PATH", help="dataset JSON")
    p.add_argument("--case", choices=sorted(CASE_TOKENS), default="orig",
                   help="evaluation split family (default: orig)")
    p.add_argument("--hier", choices=("on", "off"), default="on",
                   help="graph-level message passing (default: on)")
    p.add_argument("--fraction", type=float, default=0.2, metavar="F",
                   help="held-out fraction for the split (default: 0.2)")
    p.add_argument("--config", metavar="JSON",
                   help="config file with model and loss keys")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint JSON")
    p.add_argument("--report", metavar="PATH", help="also write the loss-trace report")
    p.add_argument("--verbose", action="store_true", help="log one line per epoch")
    p.set_defaults(fn=cmd_train,
                   _model_fields=add_schema_flags(p, ModelConfig, skip=MODEL_SKIP),
                   _loss_fields=add_schema_flags(p, LossConfig))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--ckpt", required=True, metavar="PATH")
    p.add_argument("--case", choices=sorted(CASE_TOKENS), default="orig",
                   help="evaluation split family (default: orig)")
    p.add_argument("--fraction", type=float, default=0.2, metavar="F",
                   help="held-out fraction used at training time (default: 0.2)")
    p.add_argument("--seed", type=int,
                   default=int(env_seed) if env_seed is not None else 0,
                   metavar="V", help=f"split seed (default: {seed_note})")
    p.add_argument("--metrics", metavar="LIST",
                   help="comma-separated subset of nmi,ari,acc,f1,pre (default: all)")
    p.add_argument("--out", metavar="PATH", help="also write the JSON report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="dump per-node embeddings as CSV")
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--ckpt", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("experiment", help="run a full experiment plan")
    p.add_argument("--plan", required=True, metavar="JSON", help="ExperimentPlan file")
    p.add_argument("--out", required=True, metavar="DIR", help="results directory")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, metavar="N",
                   help=f"worker processes (default: {os.cpu_count() or 1})")
    p.add_argument("--verbose", action="store_true", help="log one line per run")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("selftest", help="gradient checks, metric oracles, loss identities")
    p.add_argument("--seed", type=int,
                   default=int(env_seed) if env_seed is not None else 0,
                   metavar="V", help=f"oracle seed (default: {seed_note})")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage, 0 on --help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
