"""Eight continual-learning training strategies behind one interface.

Per-task strategies (everything except joint training) share an engine:
for each epoch, shuffle the task's train split, assemble batches (mixing
in replay memory where the strategy uses one), compute the strategy's
loss and its exact gradient, and take an Adam step.

Labels follow the incremental multi-label convention: a sample's target
vector is trusted only where annotated (its task's classes, plus whatever
a strategy fills in), and every unannotated position holds zero. Baseline
losses run the cross-entropy over the full output vector, so those zeros
act as negatives and actively erase old classes; that is the mechanism of
forgetting here, and the masking loss is the counter to it. What differs
per kind is the loss assembly:

  - finetune: full-vector cross-entropy on current batches, nothing else.
  - replay: the same loss on batches mixed half-and-half with memory.
  - lwf: adds a distillation term pulling current outputs on old-label
    columns toward the previous model's (sigmoid) outputs.
  - pseudolabel: fills old-label positions of current samples with the
    previous model's thresholded predictions before the full-vector loss.
  - lwf_replay: the lwf loss computed on mixed batches.
  - der: full-vector loss on current rows plus a mean-squared penalty
    tying memory rows' logits to the logits stored at admission.
  - rclp: replay with forward label propagation, a masking loss that
    trains only annotated positions (and excludes current-task positions
    on memory rows), feature distillation against the previous model, and
    backward consolidation of the buffer after each task.
  - joint: one training run over every task's data with full labels and a
    plateau learning-rate schedule; the upper baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import nn
from .buffer import BufferEntry, ReplayBuffer, snapshot_logits
from .errors import ConfigError, StateError
from .stream import Sample, TaskDataset

logger = logging.getLogger(__name__)

STRATEGY_KINDS = (
    "joint",
    "finetune",
    "replay",
    "lwf",
    "pseudolabel",
    "lwf_replay",
    "der",
    "rclp",
)
REPLAY_KINDS = ("replay", "lwf_replay", "der", "rclp")
CALIBRATED_KINDS = ("pseudolabel", "rclp")
FROZEN_KINDS = ("lwf", "pseudolabel", "lwf_replay", "rclp")

THRESHOLD_GRID = np.arange(1, 100) / 100.0


@dataclass
class StrategyConfig:
    kind: str
    tau: float = 2.0  # weight of the lwf distillation term
    gamma: float = 1.0  # weight of the feature distillation term
    mix_ratio: float = 0.5  # memory share of each mixed batch
    epochs_per_task: int = 10
    der_alpha: float = 1.0  # weight of the stored-logit matching term
    batch_size: int = 32
    lr: float = 0.0005
    distill_outputs: bool = False  # distill classifier outputs, not tap features
    joint_max_epochs: int = 100
    joint_lr_patience: int = 3  # epochs without val improvement before halving lr
    joint_stop_patience: int = 10

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if not 0 <= self.mix_ratio < 1:
            raise ConfigError("mix_ratio must be in [0, 1)")
        if self.epochs_per_task <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs_per_task and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.der_alpha < 0:
            raise ConfigError("der_alpha must be nonnegative")


@dataclass
class Thresholds:
    """Per-class decision thresholds, fixed once calibrated.

    ``frozen_at[j]`` records the task that calibrated class j (-1 before);
    afterwards ``h[j]`` never changes for the rest of the stream.
    """

    h: np.ndarray
    frozen_at: np.ndarray

    @classmethod
    def fresh(cls, n_classes: int) -> "Thresholds":
        return cls(
            h=np.full(n_classes, 0.5), frozen_at=np.full(n_classes, -1, dtype=np.intp)
        )


@dataclass
class StrategyState:
    """Everything a strategy carries across tasks."""

    config: StrategyConfig
    model: nn.MlpModel
    buffer: ReplayBuffer | None = None
    thresholds: Thresholds | None = None
    frozen: nn.MlpModel | None = None
    seen_label_sets: list[tuple[int, ...]] = field(default_factory=list)
    trained_tasks: int = 0


def init_strategy_state(
    config: StrategyConfig,
    model: nn.MlpModel,
    n_classes: int,
    buffer_capacity: int | None = None,
    n_tasks: int | None = None,
) -> StrategyState:
    """Allocate exactly the state the strategy kind needs: a buffer only
    for replay variants, thresholds only for calibrating kinds."""
    state = StrategyState(config=config, model=model)
    if config.kind in REPLAY_KINDS:
        if buffer_capacity is None or n_tasks is None:
            raise ConfigError(f"{config.kind} needs buffer_capacity and n_tasks")
        state.buffer = ReplayBuffer(capacity=buffer_capacity, n_tasks=n_tasks)
    if config.kind in CALIBRATED_KINDS:
        state.thresholds = Thresholds.fresh(n_classes)
    return state


# ---------------------------------------------------------------------------
# Label propagation and threshold calibration
# ---------------------------------------------------------------------------


def stamp_labels(
    model: nn.MlpModel,
    samples: list[Sample],
    label_union: np.ndarray,
    thresholds: Thresholds,
) -> int:
    """Fill unknown positions in ``label_union`` with thresholded
    predictions, in place. Positions already known are never rewritten.
    Returns the number of cells written."""
    if len(label_union) == 0 or not samples:
        return 0
    feats = np.stack([s.features for s in samples])
    probs = nn.sigmoid(nn.forward(model, feats)[0])
    written = 0
    for i, s in enumerate(samples):
        for j in label_union:
            if s.known_mask[j] == 0:
                s.targets[j] = 1.0 if probs[i, j] > thresholds.h[j] else 0.0
                s.known_mask[j] = 1
                written += 1
    return written


def propagate_forward(
    frozen: nn.MlpModel,
    samples: list[Sample],
    old_label_union: np.ndarray,
    thresholds: Thresholds,
) -> list[Sample]:
    """Stamped copies of a batch: old-task label positions filled from the
    previous model's predictions, current-task positions untouched."""
    copies = [s.copy() for s in samples]
    stamp_labels(frozen, copies, old_label_union, thresholds)
    return copies


def calibrate_thresholds(
    model: nn.MlpModel,
    val_samples: list[Sample],
    label_set: tuple[int, ...],
    thresholds: Thresholds,
    task_id: int,
) -> Thresholds:
    """Pick each new class's threshold by sweeping a fixed grid on the
    validation split and keeping the value with the best F1.

    Classes calibrated by an earlier task keep their threshold. Ties go to
    the smallest candidate. A class with no validation positives gets the
    0.5 default (logged) and is still marked calibrated.
    """
    feats = np.stack([s.features for s in val_samples])
    probs = nn.sigmoid(nn.forward(model, feats)[0])
    targets = np.stack([s.targets for s in val_samples])
    for j in label_set:
        if thresholds.frozen_at[j] >= 0:
            continue
        y = targets[:, j]
        if y.sum() == 0:
            logger.info(
                "class %d has no validation positives at task %d; threshold stays 0.5",
                j,
                task_id,
            )
            thresholds.h[j] = 0.5
        else:
            thresholds.h[j] = _best_threshold(probs[:, j], y)
        thresholds.frozen_at[j] = task_id
    return thresholds


def _best_threshold(scores: np.ndarray, y: np.ndarray) -> float:
    best_h, best_f1 = THRESHOLD_GRID[0], -1.0
    pos = y == 1
    for h in THRESHOLD_GRID:
        pred = scores > h
        tp = int(np.sum(pred & pos))
        fp = int(np.sum(pred & ~pos))
        fn = int(np.sum(~pred & pos))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f1:
            best_f1, best_h = f1, float(h)
    return best_h


# ---------------------------------------------------------------------------
# Loss pieces (each returns its value and exact gradient)
# ---------------------------------------------------------------------------


def weighted_bce(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Mean cross-entropy over the cells selected by a weight matrix.

    Returns (value, d_logits). A zero weight excludes a cell from both the
    value and the gradient; an all-zero weight matrix gives (0, zeros).
    """
    if logits.shape != targets.shape or logits.shape != weights.shape:
        raise ConfigError("logits, targets, and weights must share a shape")
    total = float(weights.sum())
    if total == 0.0:
        return 0.0, np.zeros_like(logits)
    value = float((nn.bce_elements(logits, targets) * weights).sum() / total)
    d_logits = weights * (nn.sigmoid(logits) - targets) / total
    return value, d_logits


def masking_weights(
    known: np.ndarray, is_memory: np.ndarray, label_set: tuple[int, ...]
) -> np.ndarray:
    """Known-label weights with current-task columns zeroed on memory rows."""
    w = known.astype(np.float64).copy()
    mem_rows = np.flatnonzero(is_memory)
    if mem_rows.size:
        w[np.ix_(mem_rows, np.asarray(label_set, dtype=np.intp))] = 0.0
    return w


def masked_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    known: np.ndarray,
    is_memory: np.ndarray,
    label_set: tuple[int, ...],
):
    """Replay masking loss: current rows supervise all their known labels;
    memory rows supervise known labels outside the current task's set."""
    return weighted_bce(logits, targets, masking_weights(known, is_memory, label_set))


def feature_distill_grad(current: np.ndarray, reference: np.ndarray):
    """Mean over the batch of the Euclidean distance between each sample's
    current and reference vectors; gradient w.r.t. ``current``."""
    if current.shape != reference.shape:
        raise ConfigError(
            f"feature shapes differ: {current.shape} vs {reference.shape}"
        )
    delta = current - reference
    norms = np.sqrt((delta**2).sum(axis=1))
    value = float(norms.mean())
    safe = np.where(norms > 0.0, norms, 1.0)
    d = delta / (current.shape[0] * safe[:, None])
    d[norms == 0.0] = 0.0
    return value, d


def feature_distill(model: nn.MlpModel, frozen: nn.MlpModel, inputs: np.ndarray) -> float:
    """Distillation distance between two models' tap features on a batch."""
    if model.feature_dim != frozen.feature_dim:
        raise ConfigError(
            f"feature taps disagree: {model.feature_dim} vs {frozen.feature_dim}"
        )
    _, features, _ = nn.forward(model, inputs)
    _, reference, _ = nn.forward(frozen, inputs)
    value, _ = feature_distill_grad(features, reference)
    return value


def distill_bce(logits: np.ndarray, frozen_logits: np.ndarray, cols: np.ndarray):
    """Soft-target cross-entropy pulling selected columns toward the frozen
    model's sigmoid outputs, reported above its floor so that matching
    outputs score exactly zero. The floor (the soft targets' own entropy)
    is constant in the trained model, so the gradient is the plain
    cross-entropy gradient. Returns (value, d_logits over the full shape)."""
    soft = nn.sigmoid(frozen_logits[:, cols])
    sub = logits[:, cols]
    floor = -(xlogy(soft, soft) + xlogy(1.0 - soft, 1.0 - soft))
    value = float((nn.bce_elements(sub, soft) - floor).mean())
    d = np.zeros_like(logits)
    d[:, cols] = (nn.sigmoid(sub) - soft) / sub.size
    return value, d


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------


def batch_arrays(samples: list[Sample]):
    x = np.stack([s.features for s in samples])
    y = np.stack([s.targets for s in samples])
    known = np.stack([s.known_mask for s in samples]).astype(np.float64)
    return x, y, known


def _batches(samples: list[Sample], batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in perm[start : start + batch_size]]


def _strategy_loss(state: StrategyState, batch, origins, label_set, old_union):
    """Forward pass plus the strategy's full loss and gradients.

    Baselines follow the usual incremental multi-label convention: the
    target vector is zero wherever no annotation exists, and the BCE runs
    over every output. That is what makes them forget: each task actively
    pushes unobserved (old) classes toward zero. Only the masking loss
    (rclp) restricts supervision to annotated positions.

    Returns (value, cache, d_logits, d_features_or_None).
    """
    cfg = state.config
    x, y, known = batch_arrays(batch)
    logits, features, cache = nn.forward(state.model, x)
    is_memory = np.array([o is not None for o in origins], dtype=bool)
    d_features = None
    full = np.ones_like(known)

    if cfg.kind in ("finetune", "replay", "pseudolabel"):
        value, d_logits = weighted_bce(logits, y, full)

    elif cfg.kind in ("lwf", "lwf_replay"):
        value, d_logits = weighted_bce(logits, y, full)
        if state.frozen is not None and old_union.size:
            frozen_logits, _, _ = nn.forward(state.frozen, x)
            v2, d2 = distill_bce(logits, frozen_logits, old_union)
            value += cfg.tau * v2
            d_logits = d_logits + cfg.tau * d2

    elif cfg.kind == "der":
        current_weights = full.copy()
        current_weights[is_memory] = 0.0
        value, d_logits = weighted_bce(logits, y, current_weights)
        if is_memory.any():
            stored = np.stack(
                [o.stored_logits for o in origins if o is not None]
            )
            diff = logits[is_memory] - stored
            value += cfg.der_alpha * float((diff**2).mean())
            d_mem = np.zeros_like(logits)
            d_mem[is_memory] = 2.0 * diff / diff.size
            d_logits = d_logits + cfg.der_alpha * d_mem

    elif cfg.kind == "rclp":
        value, d_logits = masked_loss(logits, y, known, is_memory, label_set)
        if state.frozen is not None and cfg.gamma > 0:
            frozen_logits, frozen_features, _ = nn.forward(state.frozen, x)
            if cfg.distill_outputs:
                v2, d2 = feature_distill_grad(logits, frozen_logits)
                d_logits = d_logits + cfg.gamma * d2
            else:
                v2, d2 = feature_distill_grad(features, frozen_features)
                d_features = cfg.gamma * d2
            value += cfg.gamma * v2

    else:
        raise ConfigError(f"strategy kind {cfg.kind!r} has no per-task training")

    return value, cache, d_logits, d_features


def train_task(
    state: StrategyState, dataset: TaskDataset, rng: np.random.Generator
) -> StrategyState:
    """Train one task in stream order and update the strategy's state.

    After the epochs, calibrating kinds fit thresholds for the task's new
    classes on the validation split; replay kinds admit buffer entries
    (stamped with propagated labels for rclp, with logits recorded for
    der); rclp additionally back-fills the new task's labels onto older
    buffer entries; distilling kinds refresh their frozen model copy.
    """
    cfg = state.config
    if cfg.kind == "joint":
        raise ConfigError("joint training runs once over all tasks; use train_joint")
    t = state.trained_tasks
    label_set = dataset.task.label_set
    old_union = np.array(
        sorted({j for ls in state.seen_label_sets for j in ls}), dtype=np.intp
    )
    params = state.model.parameters()
    adam = nn.AdamState.for_params(params, lr=cfg.lr)
    uses_buffer = cfg.kind in REPLAY_KINDS
    propagates = cfg.kind in CALIBRATED_KINDS

    for _ in range(cfg.epochs_per_task):
        for batch in _batches(dataset.train, cfg.batch_size, rng):
            if propagates and state.frozen is not None and old_union.size:
                batch = propagate_forward(
                    state.frozen, batch, old_union, state.thresholds
                )
            if uses_buffer:
                batch, origins = state.buffer.mix_batch(
                    batch, cfg.mix_ratio, rng, allow_empty=(t == 0)
                )
            else:
                origins = [None] * len(batch)
            _, cache, d_logits, d_features = _strategy_loss(
                state, batch, origins, label_set, old_union
            )
            grads = nn.backprop(state.model, cache, d_logits, d_features)
            nn.adam_step(adam, params, grads)

    if cfg.kind in CALIBRATED_KINDS:
        calibrate_thresholds(state.model, dataset.val, label_set, state.thresholds, t)
    if uses_buffer:
        stamper = None
        if cfg.kind == "rclp" and state.frozen is not None and old_union.size:
            pre_task_model = state.frozen
            thresholds = state.thresholds

            def stamper(samples):
                stamp_labels(pre_task_model, samples, old_union, thresholds)

        new_entries = state.buffer.admit(dataset.train, t, rng, label_stamper=stamper)
        if cfg.kind == "der":
            snapshot_logits(new_entries, state.model)
        if cfg.kind == "rclp":
            state.buffer.consolidate_backward(
                state.model, label_set, state.thresholds.h, t
            )
    if cfg.kind in FROZEN_KINDS:
        state.frozen = state.model.copy()
    state.seen_label_sets.append(label_set)
    state.trained_tasks += 1
    return state


def train_joint(
    model: nn.MlpModel,
    datasets: list[TaskDataset],
    config: StrategyConfig,
    rng: np.random.Generator,
) -> nn.MlpModel:
    """Upper baseline: one run over all tasks' train splits with full
    labels, halving the learning rate when validation loss plateaus and
    stopping after a long plateau."""
    train = [s for ds in datasets for s in ds.train]
    val = [s for ds in datasets for s in ds.val]
    if not train or not val:
        raise StateError("joint training needs nonempty train and val splits")
    params = model.parameters()
    adam = nn.AdamState.for_params(params, lr=config.lr)
    xv, yv, _ = batch_arrays(val)
    full_val = np.ones_like(yv)

    best = np.inf
    stale = 0
    for _ in range(config.joint_max_epochs):
        for batch in _batches(train, config.batch_size, rng):
            x, y, _ = batch_arrays(batch)
            logits, _, cache = nn.forward(model, x)
            _, d_logits = weighted_bce(logits, y, np.ones_like(y))
            grads = nn.backprop(model, cache, d_logits)
            nn.adam_step(adam, params, grads)
        val_logits, _, _ = nn.forward(model, xv)
        val_loss, _ = weighted_bce(val_logits, yv, full_val)
        if val_loss < best - 1e-4:
            best = val_loss
            stale = 0
        else:
            stale += 1
            if stale % config.joint_lr_patience == 0:
                adam.lr *= 0.5
            if stale >= config.joint_stop_patience:
                break
    return model
