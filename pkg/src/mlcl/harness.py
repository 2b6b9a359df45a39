"""Experiment orchestration: configs, multi-seed runs, and result files.

A single JSON document describes an experiment: the stream (generated from
each master seed, or loaded from manifest files), the strategy list with
optional per-strategy overrides, the seeds, and the output directory. One
run produces

  summary.csv   per-strategy mean/std over seeds of final average F1,
                average AUC, forgetting %, and the gap to joint training
  curves.csv    one row per (strategy, seed, after_task, target_task)
                with macro F1/AUC, enough to redraw per-task curves
  records/*.json   the full evaluation grid of every (strategy, seed) cell
  timings.csv   wall time per cell (informational; not deterministic)

Everything except timings.csv is a pure function of the config, so two
runs of the same file are byte-identical, and ``report`` can rebuild
summary.csv and curves.csv from the records alone.

Random streams are split per (seed, purpose): task data uses
(seed, "data", task_id) so every strategy trains on identical samples,
model init uses (seed, "init") so every strategy starts from identical
weights, and each strategy trains under its own (seed, "train", kind).
"""

import csv
import io
import json
import logging
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .buffer import DEFAULT_BUDGET_FRACTION, capacity_for
from .errors import ConfigError, StateError, ValidationError
from .metrics import RunRecord, avg_auc_up_to, avg_f1_up_to, evaluate_model, forgetting_pct, relative_gap
from .strategies import (
    REPLAY_KINDS,
    STRATEGY_KINDS,
    StrategyConfig,
    init_strategy_state,
    train_joint,
    train_task,
)
from .stream import (
    DEFAULT_INPUT_DIM,
    DEFAULT_SAMPLES_PER_TASK,
    StreamSpec,
    TaskDataset,
    build_default_stream,
    generate_task_data,
    joint_view,
    load_manifest,
    save_manifest,
)

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN_SIZES = (64, 64)
DEFAULT_FEATURE_TAP = 1

_STREAM_KEYS = {"n_samples_per_task", "input_dim", "offtask_rate_scale", "manifests"}
_EXPERIMENT_KEYS = {
    "stream",
    "strategies",
    "seeds",
    "epochs_per_task",
    "batch_size",
    "lr",
    "output_dir",
    "hidden_sizes",
    "feature_tap",
    "memory_fraction",
}
_STRATEGY_KEYS = {
    "kind",
    "tau",
    "gamma",
    "mix_ratio",
    "epochs_per_task",
    "der_alpha",
    "batch_size",
    "lr",
    "distill_outputs",
    "joint_max_epochs",
    "joint_lr_patience",
    "joint_stop_patience",
}


def rng_for(master_seed: int, *tags) -> np.random.Generator:
    """Independent generator for one purpose within one seeded run.

    String tags are hashed with crc32; integer tags pass through. Streams
    with different tag tuples never collide, so adding a strategy cannot
    perturb another strategy's data or training draws.
    """
    words = [int(master_seed)]
    for tag in tags:
        words.append(zlib.crc32(tag.encode("utf-8")) if isinstance(tag, str) else int(tag))
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class ExperimentConfig:
    """Everything a run depends on, parsed from one JSON document."""

    strategies: list[StrategyConfig]
    seeds: list[int]
    output_dir: str = "results"
    epochs_per_task: int = 10
    batch_size: int = 32
    lr: float = 0.0005
    n_samples_per_task: int = DEFAULT_SAMPLES_PER_TASK
    input_dim: int = DEFAULT_INPUT_DIM
    offtask_rate_scale: float = 1.0
    manifests: list[str] | None = None
    hidden_sizes: tuple[int, ...] = DEFAULT_HIDDEN_SIZES
    feature_tap: int = DEFAULT_FEATURE_TAP
    memory_fraction: float = DEFAULT_BUDGET_FRACTION

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.strategies:
            raise ConfigError("strategies must be nonempty")
        kinds = [s.kind for s in self.strategies]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("strategy kinds must be distinct")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.manifests is not None and not self.manifests:
            raise ConfigError("manifests list must be nonempty when given")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        unknown = sorted(set(doc) - _EXPERIMENT_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        stream = doc.get("stream", {})
        unknown = sorted(set(stream) - _STREAM_KEYS)
        if unknown:
            raise ConfigError(f"unknown stream keys {unknown}")
        if "manifests" in stream and len(stream) > 1:
            raise ConfigError("a manifest stream takes no generator parameters")

        defaults = {
            "epochs_per_task": doc.get("epochs_per_task", 10),
            "batch_size": doc.get("batch_size", 32),
            "lr": doc.get("lr", 0.0005),
        }
        strategies = []
        for entry in doc.get("strategies", []):
            if isinstance(entry, str):
                entry = {"kind": entry}
            unknown = sorted(set(entry) - _STRATEGY_KEYS)
            if unknown:
                raise ConfigError(f"unknown strategy keys {unknown}")
            if "kind" not in entry:
                raise ConfigError("every strategy entry needs a kind")
            strategies.append(StrategyConfig(**{**defaults, **entry}))

        return cls(
            strategies=strategies,
            seeds=[int(s) for s in doc.get("seeds", [])],
            output_dir=doc.get("output_dir", "results"),
            epochs_per_task=defaults["epochs_per_task"],
            batch_size=defaults["batch_size"],
            lr=defaults["lr"],
            n_samples_per_task=stream.get("n_samples_per_task", DEFAULT_SAMPLES_PER_TASK),
            input_dim=stream.get("input_dim", DEFAULT_INPUT_DIM),
            offtask_rate_scale=stream.get("offtask_rate_scale", 1.0),
            manifests=stream.get("manifests"),
            hidden_sizes=tuple(doc.get("hidden_sizes", DEFAULT_HIDDEN_SIZES)),
            feature_tap=doc.get("feature_tap", DEFAULT_FEATURE_TAP),
            memory_fraction=doc.get("memory_fraction", DEFAULT_BUDGET_FRACTION),
        )

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# Running cells
# ---------------------------------------------------------------------------


def build_stream_data(
    config: ExperimentConfig, seed: int
) -> tuple[StreamSpec | None, list[TaskDataset]]:
    """Generate (or load) every task's dataset for one master seed.

    Data draws depend only on (seed, task); the strategy list never touches
    them. Manifest streams have no generator spec and are seed-independent.
    """
    if config.manifests is not None:
        datasets = [load_manifest(p, task_id=i) for i, p in enumerate(config.manifests)]
        dims = {len(ds.train[0].features) for ds in datasets if ds.train}
        widths = {len(ds.train[0].targets) for ds in datasets if ds.train}
        if len(dims) != 1 or len(widths) != 1:
            raise ConfigError("manifest tasks disagree on feature or class dimensions")
        return None, datasets
    spec = build_default_stream(
        seed,
        n_samples_per_task=config.n_samples_per_task,
        input_dim=config.input_dim,
        offtask_rate_scale=config.offtask_rate_scale,
    )
    datasets = [
        generate_task_data(spec, t.task_id, rng_for(seed, "data", t.task_id))
        for t in spec.tasks
    ]
    return spec, datasets


def run_cell(
    strategy: StrategyConfig,
    seed: int,
    spec: StreamSpec | None,
    datasets: list[TaskDataset],
    config: ExperimentConfig,
) -> RunRecord:
    """Train one (strategy, seed) cell and evaluate the full grid.

    Sequential strategies are evaluated on every seen task after each task;
    joint training runs once and its final model fills the whole grid, so
    every record has the same lower-triangular shape.
    """
    n_classes = len(datasets[0].train[0].targets)
    input_dim = len(datasets[0].train[0].features)
    model = nn.init_mlp(
        input_dim,
        list(config.hidden_sizes),
        n_classes,
        rng_for(seed, "init"),
        feature_tap=config.feature_tap,
    )
    record = RunRecord(
        strategy=strategy.kind,
        seed=seed,
        label_sets=[ds.task.label_set for ds in datasets],
    )
    n_tasks = len(datasets)
    if strategy.kind == "joint":
        views = joint_view(spec, datasets) if spec is not None else datasets
        train_joint(model, views, strategy, rng_for(seed, "train", "joint"))
        for after in range(n_tasks):
            for target in range(after + 1):
                record.grid[(after, target)] = evaluate_model(
                    model, datasets[target], 0.5, after_task=after
                )
        return record

    capacity = None
    if strategy.kind in REPLAY_KINDS:
        capacity = capacity_for([len(ds.train) for ds in datasets], config.memory_fraction)
    state = init_strategy_state(
        strategy, model, n_classes, buffer_capacity=capacity, n_tasks=n_tasks
    )
    train_rng = rng_for(seed, "train", strategy.kind)
    for after, dataset in enumerate(datasets):
        train_task(state, dataset, train_rng)
        thresholds = state.thresholds.h if state.thresholds is not None else 0.5
        for target in range(after + 1):
            record.grid[(after, target)] = evaluate_model(
                state.model, datasets[target], thresholds, after_task=after
            )
    return record


@dataclass
class ExperimentResult:
    table: "SummaryTable"
    records: list[RunRecord]
    failures: list[tuple[str, int, str]]
    written: list[str]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (strategy, seed) cell, persist records, aggregate.

    A failing cell is logged and skipped; the rest of the experiment
    continues. The run aborts only if no cell at all succeeds.
    """
    records: list[RunRecord] = []
    failures: list[tuple[str, int, str]] = []
    timings: dict[tuple[str, int], float] = {}
    for seed in config.seeds:
        spec, datasets = build_stream_data(config, seed)
        for strategy in config.strategies:
            start = time.perf_counter()
            try:
                record = run_cell(strategy, seed, spec, datasets, config)
            except Exception as exc:
                logger.error("cell (%s, seed %d) failed: %s", strategy.kind, seed, exc)
                failures.append((strategy.kind, seed, f"{type(exc).__name__}: {exc}"))
                continue
            record.wall_time = time.perf_counter() - start
            timings[(record.strategy, record.seed)] = record.wall_time
            records.append(record)
            logger.info(
                "cell (%s, seed %d) done in %.1fs", record.strategy, seed, record.wall_time
            )
    if not records:
        raise StateError("every (strategy, seed) cell failed; nothing to aggregate")
    table = summarize(records)
    written = emit_outputs(records, config.output_dir, timings=timings)
    return ExperimentResult(table=table, records=records, failures=failures, written=written)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class SummaryRow:
    strategy: str
    n_seeds: int
    f1_mean: float
    f1_std: float
    auc_mean: float
    auc_std: float
    forgetting_mean: float | None
    forgetting_std: float | None
    gap_mean: float | None
    gap_std: float | None


@dataclass
class SummaryTable:
    """Per-strategy aggregate over seeds, in canonical strategy order."""

    rows: list[SummaryRow] = field(default_factory=list)

    def row(self, strategy: str) -> SummaryRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise StateError(f"no summary row for strategy {strategy!r}")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.strategy, str(r.n_seeds)]
                + [_fmt6(v) for v in (r.f1_mean, r.f1_std, r.auc_mean, r.auc_std)]
                + [_fmt6(r.forgetting_mean), _fmt6(r.forgetting_std)]
                + [_fmt6(r.gap_mean), _fmt6(r.gap_std)]
            )
        return buf.getvalue()

    def format(self) -> str:
        """Aligned text table for terminal output."""
        header = ["strategy", "seeds", "avg_f1", "avg_auc", "forget_%", "gap_%"]
        body = []
        for r in self.rows:
            body.append(
                [
                    r.strategy,
                    str(r.n_seeds),
                    f"{r.f1_mean:.3f}±{r.f1_std:.3f}",
                    f"{r.auc_mean:.3f}±{r.auc_std:.3f}",
                    "-" if r.forgetting_mean is None else f"{r.forgetting_mean:.1f}±{r.forgetting_std:.1f}",
                    "-" if r.gap_mean is None else f"{r.gap_mean:.1f}±{r.gap_std:.1f}",
                ]
            )
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for row in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        return "\n".join(lines)


SUMMARY_COLUMNS = [
    "strategy",
    "seeds",
    "avg_f1_mean",
    "avg_f1_std",
    "avg_auc_mean",
    "avg_auc_std",
    "forgetting_pct_mean",
    "forgetting_pct_std",
    "relative_gap_pct_mean",
    "relative_gap_pct_std",
]

CURVES_COLUMNS = ["strategy", "seed", "after_task", "target_task", "macro_f1", "macro_auc"]


def _fmt6(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def _canonical(records: list[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: (STRATEGY_KINDS.index(r.strategy), r.seed))


def summarize(records: list[RunRecord]) -> SummaryTable:
    """Aggregate records into one row per strategy.

    The gap column compares each strategy's final average F1 to the joint
    run of the same seed; joint itself gets no forgetting or gap entries,
    and the gap stays empty when no joint run is present.
    """
    if not records:
        raise StateError("no run records to summarize")
    seen: set[tuple[str, int]] = set()
    for r in records:
        key = (r.strategy, r.seed)
        if key in seen:
            raise ConfigError(f"duplicate record for {key}")
        seen.add(key)

    ordered = _canonical(records)
    joint_f1: dict[int, float] = {}
    for r in ordered:
        if r.strategy == "joint":
            joint_f1[r.seed] = avg_f1_up_to(r, r.n_tasks - 1)

    table = SummaryTable()
    for kind in STRATEGY_KINDS:
        group = [r for r in ordered if r.strategy == kind]
        if not group:
            continue
        f1s = [avg_f1_up_to(r, r.n_tasks - 1) for r in group]
        aucs = [avg_auc_up_to(r, r.n_tasks - 1) for r in group]
        if kind == "joint":
            forgets = gaps = None
        else:
            forgets = [forgetting_pct(r)[1] for r in group]
            gaps = []
            for r, f1 in zip(group, f1s):
                base = joint_f1.get(r.seed)
                if base is None:
                    continue
                try:
                    gaps.append(relative_gap(f1, base))
                except ValidationError:
                    logger.info(
                        "joint F1 for seed %d is not positive; gap skipped", r.seed
                    )
            gaps = gaps or None
        table.rows.append(
            SummaryRow(
                strategy=kind,
                n_seeds=len(group),
                f1_mean=float(np.mean(f1s)),
                f1_std=float(np.std(f1s)),
                auc_mean=float(np.mean(aucs)),
                auc_std=float(np.std(aucs)),
                forgetting_mean=None if forgets is None else float(np.mean(forgets)),
                forgetting_std=None if forgets is None else float(np.std(forgets)),
                gap_mean=None if gaps is None else float(np.mean(gaps)),
                gap_std=None if gaps is None else float(np.std(gaps)),
            )
        )
    return table


def curves_csv_text(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVES_COLUMNS)
    for r in _canonical(records):
        for (after, target) in sorted(r.grid):
            cell = r.grid[(after, target)]
            writer.writerow(
                [
                    r.strategy,
                    str(r.seed),
                    str(after),
                    str(target),
                    f"{cell.macro_f1:.17g}",
                    f"{cell.macro_auc:.17g}",
                ]
            )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def record_filename(record: RunRecord) -> str:
    return f"{record.strategy}_seed{record.seed}.json"


def _write_text(path: Path, text: str, written: list[Path]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise StateError(f"failed writing {path}: {exc}") from exc
    written.append(path)


def emit_outputs(
    records: list[RunRecord],
    output_dir: str,
    timings: dict[tuple[str, int], float] | None = None,
) -> list[str]:
    """Write records/*.json, curves.csv, and summary.csv under output_dir.

    timings, when given, additionally land in timings.csv (wall clock, so
    outside any byte-identity guarantee). On any failure every file this
    call already wrote is removed before the error propagates.
    """
    if not records:
        raise StateError("emit_outputs needs at least one record")
    out = Path(output_dir)
    records_dir = out / "records"
    written: list[Path] = []
    try:
        try:
            records_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StateError(f"cannot create {records_dir}: {exc}") from exc
        for record in _canonical(records):
            text = json.dumps(record.to_jsonable(), sort_keys=True, indent=1) + "\n"
            _write_text(records_dir / record_filename(record), text, written)
        _write_text(out / "curves.csv", curves_csv_text(records), written)
        _write_text(out / "summary.csv", summarize(records).to_csv_text(), written)
        if timings is not None:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["strategy", "seed", "wall_time_sec"])
            for (kind, seed), wall in sorted(
                timings.items(), key=lambda kv: (STRATEGY_KINDS.index(kv[0][0]), kv[0][1])
            ):
                writer.writerow([kind, str(seed), f"{wall:.3f}"])
            _write_text(out / "timings.csv", buf.getvalue(), written)
    except Exception:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise
    return [str(p) for p in written]


def load_records(output_dir: str) -> list[RunRecord]:
    records_dir = Path(output_dir) / "records"
    paths = sorted(records_dir.glob("*.json"))
    if not paths:
        raise StateError(f"no run records under {records_dir}")
    records = []
    for path in paths:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                records.append(RunRecord.from_jsonable(json.load(fh)))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise StateError(f"cannot load record {path}: {exc}") from exc
    return records


def report(output_dir: str) -> SummaryTable:
    """Rebuild summary.csv and curves.csv from the persisted records."""
    records = load_records(output_dir)
    table = summarize(records)
    out = Path(output_dir)
    written: list[Path] = []
    try:
        _write_text(out / "curves.csv", curves_csv_text(records), written)
        _write_text(out / "summary.csv", table.to_csv_text(), written)
    except Exception:
        for path in written:
            try:
                path.unlink()
            except OSError:
                pass
        raise
    return table


def gen_stream(doc: dict, out_csv: str) -> list[str]:
    """Export a generated stream as one manifest CSV per task.

    doc holds the stream parameters ({"seed", "n_samples_per_task",
    "input_dim", "offtask_rate_scale"}, all optional). Task k lands next
    to out_csv as <stem>_task<k><ext>.
    """
    unknown = sorted(set(doc) - {"seed", *(_STREAM_KEYS - {"manifests"})})
    if unknown:
        raise ConfigError(f"unknown stream keys {unknown}")
    seed = int(doc.get("seed", 0))
    spec = build_default_stream(
        seed,
        n_samples_per_task=doc.get("n_samples_per_task", DEFAULT_SAMPLES_PER_TASK),
        input_dim=doc.get("input_dim", DEFAULT_INPUT_DIM),
        offtask_rate_scale=doc.get("offtask_rate_scale", 1.0),
    )
    root, ext = os.path.splitext(out_csv)
    ext = ext or ".csv"
    paths = []
    for task in spec.tasks:
        dataset = generate_task_data(spec, task.task_id, rng_for(seed, "data", task.task_id))
        path = f"{root}_task{task.task_id}{ext}"
        try:
            save_manifest(dataset, path)
        except OSError as exc:
            raise StateError(f"failed writing {path}: {exc}") from exc
        paths.append(path)
    return paths
