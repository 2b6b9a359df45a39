"""Evaluation suite: F1, AUC-ROC, stream-level aggregates, and run records.

Per-class F1 and AUC are computed on each task's test split over that
task's label set, against the true latent labels. Classes without test
positives have no defined F1 and are excluded from macros (logged);
single-class columns likewise have no defined AUC. Stream-level aggregates
(average F1 up to a task, percent forgetting, relative gap to the joint
upper baseline) consume the lower-triangular grid of per-task evaluations
stored in a RunRecord.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import ConfigError, StateError, ValidationError
from .stream import TaskDataset

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    """One model evaluated on one task's test split.

    Per-class vectors align with the task's label set; entries are NaN for
    classes excluded from the macro (no positives for F1, single-class
    targets for AUC). Macros are means over the included classes.
    """

    per_class_f1: np.ndarray
    macro_f1: float
    per_class_auc: np.ndarray
    macro_auc: float
    evaluated_after_task: int
    target_task: int

    def to_jsonable(self) -> dict:
        return {
            "per_class_f1": [None if np.isnan(v) else float(v) for v in self.per_class_f1],
            "macro_f1": float(self.macro_f1),
            "per_class_auc": [None if np.isnan(v) else float(v) for v in self.per_class_auc],
            "macro_auc": float(self.macro_auc),
            "evaluated_after_task": int(self.evaluated_after_task),
            "target_task": int(self.target_task),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "EvalResult":
        return cls(
            per_class_f1=np.array(
                [np.nan if v is None else v for v in d["per_class_f1"]], dtype=np.float64
            ),
            macro_f1=float(d["macro_f1"]),
            per_class_auc=np.array(
                [np.nan if v is None else v for v in d["per_class_auc"]], dtype=np.float64
            ),
            macro_auc=float(d["macro_auc"]),
            evaluated_after_task=int(d["evaluated_after_task"]),
            target_task=int(d["target_task"]),
        )


@dataclass
class RunRecord:
    """Everything one (strategy, seed) run produced.

    ``grid[(after, target)]`` holds the evaluation of the model state after
    training task ``after`` on task ``target``'s test split, for every
    target <= after (lower-triangular-complete). Wall time is kept in
    memory for the timing report but stays out of the serialized form so
    identical runs serialize identically.
    """

    strategy: str
    seed: int
    label_sets: list[tuple[int, ...]]
    grid: dict[tuple[int, int], EvalResult] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def n_tasks(self) -> int:
        return len(self.label_sets)

    def require_complete_through(self, after_task: int) -> None:
        for a in range(after_task + 1):
            for t in range(a + 1):
                if (a, t) not in self.grid:
                    raise StateError(
                        f"run {self.strategy}/seed {self.seed}: grid missing cell "
                        f"(after={a}, target={t})"
                    )

    def to_jsonable(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": int(self.seed),
            "label_sets": [list(map(int, ls)) for ls in self.label_sets],
            "grid": {
                f"{a},{t}": self.grid[(a, t)].to_jsonable()
                for (a, t) in sorted(self.grid)
            },
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "RunRecord":
        grid = {}
        for key, cell in d["grid"].items():
            a, t = key.split(",")
            grid[(int(a), int(t))] = EvalResult.from_jsonable(cell)
        return cls(
            strategy=d["strategy"],
            seed=int(d["seed"]),
            label_sets=[tuple(ls) for ls in d["label_sets"]],
            grid=grid,
        )


def macro_f1(scores: np.ndarray, targets: np.ndarray, thresholds) -> tuple[np.ndarray, float]:
    """Per-class and macro F1 at the given decision thresholds.

    ``scores`` and ``targets`` are (n_samples, n_classes) over the
    evaluation label set; ``thresholds`` is a scalar or per-class vector.
    A class with no positive targets has NaN per-class F1 and is excluded
    from the macro (logged). Predictions are scores strictly above the
    threshold; a class where precision + recall = 0 scores 0.
    """
    if scores.shape != targets.shape:
        raise ConfigError("scores and targets must share a shape")
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (scores.shape[1],))
    pred = scores > thr
    pos = targets > 0
    per_class = np.empty(scores.shape[1])
    included = []
    for j in range(scores.shape[1]):
        if not pos[:, j].any():
            per_class[j] = np.nan
            logger.info("macro_f1: class %d has no positives, excluded", j)
            continue
        tp = int(np.sum(pred[:, j] & pos[:, j]))
        fp = int(np.sum(pred[:, j] & ~pos[:, j]))
        fn = int(np.sum(~pred[:, j] & pos[:, j]))
        denom = 2 * tp + fp + fn
        per_class[j] = 2.0 * tp / denom if denom else 0.0
        included.append(per_class[j])
    macro = float(np.mean(included)) if included else 0.0
    return per_class, macro


def auc_roc(scores: np.ndarray, targets: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half (the normalized Mann-Whitney U statistic)."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    pos = targets > 0
    n_pos = int(pos.sum())
    n_neg = int(len(targets) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auc_roc needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class and macro AUC; single-class columns are NaN and excluded."""
    per_class = np.empty(scores.shape[1])
    included = []
    for j in range(scores.shape[1]):
        try:
            per_class[j] = auc_roc(scores[:, j], targets[:, j])
            included.append(per_class[j])
        except ValidationError:
            per_class[j] = np.nan
            logger.info("macro_auc: class %d is single-class, excluded", j)
    macro = float(np.mean(included)) if included else 0.0
    return per_class, macro


def evaluate_model(
    model: nn.MlpModel,
    dataset: TaskDataset,
    thresholds,
    after_task: int,
) -> EvalResult:
    """Evaluate a model on one task's test split over its label set.

    ``thresholds`` is a scalar or a full per-class vector (indexed by class
    id, from which the task's label-set entries are taken). Ground truth is
    the latent label vector.
    """
    label_set = np.asarray(dataset.task.label_set, dtype=np.intp)
    x = np.stack([s.features for s in dataset.test])
    truth = np.stack([s.latent for s in dataset.test]).astype(np.float64)
    probs = nn.sigmoid(nn.forward(model, x)[0])
    thr = np.asarray(thresholds, dtype=np.float64)
    thr = thr[label_set] if thr.ndim else thr
    scores, targets = probs[:, label_set], truth[:, label_set]
    f1s, mf1 = macro_f1(scores, targets, thr)
    aucs, mauc = macro_auc(scores, targets)
    return EvalResult(
        per_class_f1=f1s,
        macro_f1=mf1,
        per_class_auc=aucs,
        macro_auc=mauc,
        evaluated_after_task=after_task,
        target_task=dataset.task.task_id,
    )


def avg_f1_up_to(record: RunRecord, i: int) -> float:
    """Mean per-class F1 over every (task k <= i, class in task k's label
    set) pair, evaluated with the model state after task i. Each task's
    test set contributes its own label set, so a label set re-presented in
    a second domain contributes once per presentation."""
    record.require_complete_through(i)
    values = []
    for k in range(i + 1):
        cell = record.grid[(i, k)]
        values.extend(v for v in cell.per_class_f1 if not np.isnan(v))
    if not values:
        raise StateError(f"avg_f1_up_to({i}): every class was excluded")
    return float(np.mean(values))


def avg_auc_up_to(record: RunRecord, i: int) -> float:
    """AUC companion of avg_f1_up_to over the same (task, class) pairs."""
    record.require_complete_through(i)
    values = []
    for k in range(i + 1):
        cell = record.grid[(i, k)]
        values.extend(v for v in cell.per_class_auc if not np.isnan(v))
    if not values:
        raise StateError(f"avg_auc_up_to({i}): every class was excluded")
    return float(np.mean(values))


def forgetting_pct(record: RunRecord) -> tuple[dict[int, float], float]:
    """Percent drop from each task's just-after macro F1 to its final one.

    Returns (per-task percentages, mean). The mean covers tasks before the
    final one (the final task has no post-training exposure); tasks whose
    just-after F1 is zero are excluded and logged.
    """
    last = record.n_tasks - 1
    record.require_complete_through(last)
    per_task: dict[int, float] = {}
    included = []
    for k in range(record.n_tasks):
        just_after = record.grid[(k, k)].macro_f1
        final = record.grid[(last, k)].macro_f1
        if just_after == 0.0:
            logger.info("forgetting_pct: task %d just-after F1 is 0, excluded", k)
            continue
        pct = 100.0 * (just_after - final) / just_after
        per_task[k] = pct
        if k < last:
            included.append(pct)
    if not included:
        raise StateError("forgetting_pct: no task has nonzero just-after F1")
    return per_task, float(np.mean(included))


def relative_gap(method_final_f1: float, joint_final_f1: float) -> float:
    """Percent shortfall of a method's final average F1 against joint
    training's."""
    if joint_final_f1 <= 0.0:
        raise ValidationError("relative gap needs a positive joint baseline F1")
    return 100.0 * (joint_final_f1 - method_final_f1) / joint_final_f1
