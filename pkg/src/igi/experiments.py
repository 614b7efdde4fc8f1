"""Experiment matrix: variants x cases x modes, repeated over seeds.

One plan describes the whole grid.  Each cell runs its seeds through
generate, split, train, infer, and metrics, and the table reports
mean(std) per metric on the x100 scale.  Datasets are paired by run
index across variants and cells by default so comparisons between rows
share data; a flag regenerates per cell instead.

Trained variants default to float32, which roughly halves the wall
clock per run without moving the reported metrics at the table's two
decimals; the model's own default stays float64.
"""

from __future__ import annotations

import csv
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import canonjson
from .evalsuite import (MetricReport, em_baseline, evaluate, infer_nodes,
                        kmeans_baseline, model_scores, sil_baseline)
from .graphdata import CASES, load_dataset, make_split
from .losses import LossConfig, TrainingDivergence, train
from .model import DTYPES, variant_config
from .synthgen import ConfigError, SynthConfig, gen_dataset

MODES = ("hierarchical", "single")
VARIANTS = ("gmgcn", "gmgcn-noncon", "attgcn", "kmeans", "em-gmm", "sil")
TRAINED_VARIANTS = ("gmgcn", "gmgcn-noncon", "attgcn")
METRICS = ("nmi", "ari", "acc", "f1", "pre")


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything run_experiment needs, JSON round-trippable.

    The dataset comes either from ``synth`` (regenerated per seed) or
    from ``dataset_path`` (one fixed file for every run).
    """

    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset_path: str | None = None
    cases: tuple = CASES
    modes: tuple = MODES
    variants: tuple = VARIANTS
    runs: int = 10
    base_seed: int = 0
    holdout_fraction: float = 0.2
    regenerate_per_cell: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    train_dtype: str = "float32"

    def __post_init__(self):
        def fail(msg):
            raise ConfigError(msg)

        for name, allowed in (("cases", CASES), ("modes", MODES),
                              ("variants", VARIANTS)):
            values = tuple(getattr(self, name))
            if not values:
                fail(f"{name} must be non-empty")
            if len(set(values)) != len(values):
                fail(f"{name} has duplicates")
            bad = [v for v in values if v not in allowed]
            if bad:
                fail(f"unknown {name} entry: {bad[0]}")
            object.__setattr__(self, name, values)
        if self.runs < 1:
            fail("runs must be >= 1")
        if self.base_seed < 0:
            fail("base_seed must be a non-negative integer")
        if not 0.0 <= self.holdout_fraction < 1.0:
            fail("holdout_fraction must lie in [0, 1)")
        if self.train_dtype not in DTYPES:
            fail(f"train_dtype must be one of {DTYPES}")

    def to_obj(self) -> dict:
        obj = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("synth", "loss"):
                v = v.to_obj()
            elif isinstance(v, tuple):
                v = list(v)
            obj[f.name] = v
        return obj

    @classmethod
    def from_obj(cls, raw: dict) -> "ExperimentPlan":
        if not isinstance(raw, dict):
            raise ConfigError("plan must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown plan keys: {', '.join(unknown)}")
        kwargs = dict(raw)
        if "synth" in kwargs:
            kwargs["synth"] = SynthConfig.from_obj(kwargs["synth"])
        if "loss" in kwargs:
            try:
                kwargs["loss"] = LossConfig.from_obj(kwargs["loss"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        for name in ("cases", "modes", "variants"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def load_plan(path) -> ExperimentPlan:
    return ExperimentPlan.from_obj(canonjson.load_path(path))


def save_plan(plan: ExperimentPlan, path) -> None:
    Path(path).write_text(canonjson.dumps(plan.to_obj()) + "\n")


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    """Outcome of one (variant, case, mode, seed) run."""

    variant: str
    case: str
    mode: str
    seed: int
    metrics: MetricReport | None
    error: str | None
    wall_sec: float

    def key(self):
        return (self.variant, self.case, self.mode, self.seed)


def _dataset_seed(plan: ExperimentPlan, variant: str, case: str, mode: str,
                  run: int) -> int:
    base = plan.base_seed + run
    if not plan.regenerate_per_cell:
        return base
    # Per-cell regeneration folds the cell key into the seed so every
    # cell draws distinct data while staying reproducible.
    return base + (zlib.crc32(f"{variant}|{case}|{mode}".encode()) << 16)


def execute_run(plan: ExperimentPlan, variant: str, case: str, mode: str,
                run: int, dataset=None) -> RunRecord:
    """Run one grid entry end to end; divergence becomes a failure
    record instead of an exception."""
    seed = plan.base_seed + run
    start = time.perf_counter()
    try:
        ds = dataset
        if ds is None:
            if plan.dataset_path is not None:
                ds = load_dataset(plan.dataset_path)
            else:
                cfg = replace(plan.synth,
                              seed=_dataset_seed(plan, variant, case, mode, run))
                ds = gen_dataset(cfg)
        split = make_split(ds, case, plan.holdout_fraction, seed=seed)
        if variant in TRAINED_VARIANTS:
            model_variant = "attgcn" if variant == "attgcn" else "gmgcn"
            mc = variant_config(ds, variant=model_variant, hier_mode=mode,
                                dtype=plan.train_dtype)
            lc = replace(plan.loss, seed=seed,
                         alpha=1.0 if variant == "gmgcn-noncon" else plan.loss.alpha)
            report = train(ds, split, mc, lc)
            assignment = infer_nodes(ds, report.params, mc, split)
            scores = model_scores(ds, report.params, mc, split)
        else:
            runner = {"kmeans": kmeans_baseline, "em-gmm": em_baseline,
                      "sil": sil_baseline}[variant]
            assignment, scores = runner(ds, split, seed)
        metrics = evaluate(ds, split, assignment, scores)
        return RunRecord(variant, case, mode, seed, metrics, None,
                         time.perf_counter() - start)
    except TrainingDivergence as exc:
        return RunRecord(variant, case, mode, seed, None, str(exc),
                         time.perf_counter() - start)


def _execute_payload(payload):
    plan, variant, case, mode, run = payload
    return execute_run(plan, variant, case, mode, run)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    """Aggregate of one (variant, case, mode) cell over its runs."""

    variant: str
    case: str
    mode: str
    stats: tuple          # ((metric, mean, std), ...) in METRICS order
    runs: int
    failures: int

    def stat(self, metric: str):
        for name, mean, std in self.stats:
            if name == metric:
                return mean, std
        raise KeyError(metric)

    def formatted(self, metric: str) -> str:
        if self.failures == self.runs:
            return f"FAILED({self.failures})"
        mean, std = self.stat(metric)
        return f"{100.0 * mean:.2f}({100.0 * std:.2f})"


@dataclass(frozen=True)
class ResultsTable:
    """All cells of a finished plan plus the raw per-run records."""

    cells: tuple
    records: tuple
    runs: int

    def cell(self, variant: str, case: str, mode: str) -> CellResult:
        for c in self.cells:
            if (c.variant, c.case, c.mode) == (variant, case, mode):
                return c
        raise KeyError((variant, case, mode))

    def mean(self, variant: str, case: str, mode: str, metric: str) -> float:
        return self.cell(variant, case, mode).stat(metric)[0]

    def keys(self):
        return tuple((c.variant, c.case, c.mode) for c in self.cells)


def _aggregate(records, variant, case, mode, runs) -> CellResult:
    cell = [r for r in records
            if (r.variant, r.case, r.mode) == (variant, case, mode)]
    good = [r.metrics for r in cell if r.metrics is not None]
    stats = []
    for metric in METRICS:
        if good:
            vals = np.asarray([getattr(m, metric) for m in good])
            mean = float(vals.mean())
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        else:
            mean = std = float("nan")
        stats.append((metric, mean, std))
    return CellResult(variant=variant, case=case, mode=mode,
                      stats=tuple(stats), runs=runs,
                      failures=len(cell) - len(good))


def run_experiment(plan: ExperimentPlan, out_dir=None, jobs: int = 1,
                   log=None) -> ResultsTable:
    """Execute the full grid and aggregate it.

    Runs fan out over a process pool when ``jobs`` > 1 and are merged
    back in (variant, case, mode, seed) order, so the result does not
    depend on scheduling.  When ``out_dir`` is given, results.csv,
    results.md, and per-run JSONs are written there.
    """
    tasks = [(plan, variant, case, mode, run)
             for variant in plan.variants
             for case in plan.cases
             for mode in plan.modes
             for run in range(plan.runs)]
    records = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_execute_payload, tasks):
                records[rec.key()] = rec
                if log:
                    log(rec)
    else:
        cache = {}
        for plan_, variant, case, mode, run in tasks:
            ds = None
            if plan.dataset_path is None:
                ds_seed = _dataset_seed(plan, variant, case, mode, run)
                if ds_seed not in cache:
                    cache[ds_seed] = gen_dataset(replace(plan.synth, seed=ds_seed))
                ds = cache[ds_seed]
            rec = execute_run(plan_, variant, case, mode, run, dataset=ds)
            records[rec.key()] = rec
            if log:
                log(rec)
    ordered = tuple(records[k] for k in sorted(records))
    cells = tuple(_aggregate(ordered, variant, case, mode, plan.runs)
                  for variant in plan.variants
                  for case in plan.cases
                  for mode in plan.modes)
    table = ResultsTable(cells=cells, records=ordered, runs=plan.runs)
    if out_dir is not None:
        write_results(table, out_dir)
    return table


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def write_results(table: ResultsTable, out_dir) -> None:
    """results.csv (byte-stable), results.md, and runs/*.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "case", "mode", "metric", "mean", "std",
                    "runs", "failures", "formatted"])
        for c in table.cells:
            for metric, mean, std in c.stats:
                w.writerow([c.variant, c.case, c.mode, metric,
                            f"{100.0 * mean:.4f}", f"{100.0 * std:.4f}",
                            c.runs, c.failures, c.formatted(metric)])
    (out / "results.md").write_text(results_markdown(table))
    run_dir = out / "runs"
    run_dir.mkdir(exist_ok=True)
    for rec in table.records:
        obj = {
            "variant": rec.variant, "case": rec.case, "mode": rec.mode,
            "seed": rec.seed, "error": rec.error,
            "metrics": None if rec.metrics is None else
            {m: getattr(rec.metrics, m) for m in METRICS},
            "wall_sec": rec.wall_sec,
        }
        name = f"{rec.variant}-{rec.case}-{rec.mode}-seed{rec.seed}.json"
        (run_dir / name).write_text(canonjson.dumps(obj) + "\n")


def results_markdown(table: ResultsTable) -> str:
    """One markdown table per hierarchy mode, variants x cases as rows."""
    lines = ["# Results", ""]
    modes = []
    for c in table.cells:
        if c.mode not in modes:
            modes.append(c.mode)
    for mode in modes:
        lines.append(f"## {mode}")
        lines.append("")
        lines.append("| variant | case | " + " | ".join(METRICS) + " |")
        lines.append("|" + "---|" * (len(METRICS) + 2))
        for c in table.cells:
            if c.mode != mode:
                continue
            row = [c.variant, c.case] + [c.formatted(m) for m in METRICS]
            if c.failures and c.failures < c.runs:
                row[1] += f" ({c.failures} failed)"
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    lines.append(f"Values are mean(std) x100 over {table.runs} runs; "
                 "std uses the unbiased (n-1) convention and single runs "
                 "report 0.00. Failed runs are excluded from the statistics "
                 "and counted next to the case name.")
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Table comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellDelta:
    variant: str
    case: str
    mode: str
    metric: str
    ours: float
    reference: float
    delta: float
    passed: bool


@dataclass(frozen=True)
class ComparisonReport:
    deltas: tuple
    all_pass: bool


def compare_tables(ours: ResultsTable, reference: ResultsTable,
                   tolerance: float) -> ComparisonReport:
    """Per-cell absolute mean deltas (x100 scale) against a tolerance.

    Only cells present in both tables are compared; no overlap is an
    error.
    """
    shared = [k for k in ours.keys() if k in set(reference.keys())]
    if not shared:
        raise ValueError("tables have no cells in common")
    deltas = []
    for variant, case, mode in shared:
        for metric in METRICS:
            a = 100.0 * ours.mean(variant, case, mode, metric)
            b = 100.0 * reference.mean(variant, case, mode, metric)
            d = abs(a - b)
            deltas.append(CellDelta(variant, case, mode, metric, a, b, d,
                                    bool(d <= tolerance)))
    return ComparisonReport(deltas=tuple(deltas),
                            all_pass=all(d.passed for d in deltas))
