"""Fixed-budget replay memory with per-task quotas.

The buffer holds a small fraction of the stream (3% of all training
samples by default) split evenly across tasks, so late tasks cannot crowd
out early ones and consolidated entries are never evicted. Entries are
deep copies: label stamping and backward consolidation may rewrite their
label vectors without touching the live datasets.

Three memory layouts fall out of how entries are written:
  - plain: no stamper, no consolidation; each entry knows only its origin
    task's labels.
  - forward-stamped: a label stamper at admission fills all earlier tasks'
    label positions, so entries know every label up to their admission.
  - fully consolidated: stamping plus backward consolidation after each
    task keeps every stored entry's mask covering all labels seen so far.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigError, StateError, ValidationError
from .stream import Sample

DEFAULT_BUDGET_FRACTION = 0.03

# A stamper mutates samples in place, filling some unknown label positions.
LabelStamper = Callable[[list[Sample]], None]


@dataclass
class BufferEntry:
    sample: Sample
    admitted_at: int  # task index during which the entry was stored
    stored_logits: np.ndarray | None = None  # model outputs at admission time


def capacity_for(train_sizes: list[int], fraction: float = DEFAULT_BUDGET_FRACTION) -> int:
    """Total memory budget: ceil(fraction * total training samples)."""
    if fraction <= 0 or fraction >= 1:
        raise ConfigError(f"budget fraction must be in (0, 1), got {fraction}")
    return math.ceil(fraction * sum(train_sizes))


@dataclass
class ReplayBuffer:
    capacity: int
    n_tasks: int
    entries: list[BufferEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        if self.n_tasks <= 0:
            raise ConfigError("buffer n_tasks must be positive")

    @property
    def per_task_quota(self) -> int:
        return self.capacity // self.n_tasks

    def __len__(self) -> int:
        return len(self.entries)

    def counts_by_task(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.sample.origin_task] = counts.get(e.sample.origin_task, 0) + 1
        return counts

    def admit(
        self,
        samples: list[Sample],
        task_id: int,
        rng: np.random.Generator,
        label_stamper: LabelStamper | None = None,
    ) -> list[BufferEntry]:
        """Store a uniform random subset of a task's train split.

        Up to ``per_task_quota`` entries per origin task, never exceeding
        total capacity. Stored samples are deep copies; when a stamper is
        given it fills earlier tasks' label positions on the copies before
        they are stored.
        """
        if self.per_task_quota == 0:
            raise StateError(
                f"capacity {self.capacity} over {self.n_tasks} tasks leaves a zero quota"
            )
        if self.per_task_quota > len(samples):
            raise ValidationError(
                f"per-task quota {self.per_task_quota} exceeds train size {len(samples)}"
            )
        existing = self.counts_by_task().get(task_id, 0)
        take = min(self.per_task_quota - existing, self.capacity - len(self.entries))
        if take <= 0:
            return []
        chosen = rng.choice(len(samples), size=take, replace=False)
        copies = [samples[i].copy() for i in sorted(chosen)]
        if label_stamper is not None:
            label_stamper(copies)
        new_entries = [BufferEntry(sample=s, admitted_at=task_id) for s in copies]
        self.entries.extend(new_entries)
        return new_entries

    def mix_batch(
        self,
        current: list[Sample],
        mix_ratio: float,
        rng: np.random.Generator,
        allow_empty: bool = False,
    ) -> tuple[list[Sample], list[BufferEntry | None]]:
        """Assemble a training batch from current and memory samples.

        Keeps ceil((1-ratio)*B) current samples and draws floor(ratio*B)
        memory entries uniformly with replacement, preserving batch size.
        Returns the batch plus a parallel provenance list (the buffer entry
        for memory rows, None for current rows). An empty buffer is only
        legal on the first task (``allow_empty``), where the batch passes
        through unchanged.
        """
        if not 0 <= mix_ratio < 1:
            raise ConfigError(f"mix_ratio must be in [0, 1), got {mix_ratio}")
        if mix_ratio == 0:
            return list(current), [None] * len(current)
        if not self.entries:
            if allow_empty:
                return list(current), [None] * len(current)
            raise StateError("mix_batch on an empty buffer")
        b = len(current)
        n_memory = int(mix_ratio * b)
        n_current = b - n_memory  # == ceil((1 - ratio) * b)
        drawn = [self.entries[i] for i in rng.integers(0, len(self.entries), size=n_memory)]
        batch = list(current[:n_current]) + [e.sample for e in drawn]
        origins: list[BufferEntry | None] = [None] * n_current + list(drawn)
        return batch, origins

    def consolidate_backward(
        self,
        model: nn.MlpModel,
        label_set: tuple[int, ...],
        thresholds: np.ndarray,
        current_task: int,
    ) -> int:
        """Stamp the just-trained task's predicted labels onto older entries.

        For every entry admitted before ``current_task``, each still-unknown
        position j in ``label_set`` gets target 1 if sigmoid(logit_j) >
        thresholds[j], else 0, and is marked known. Positions already known
        are never rewritten, so stamping is first-write-wins and the call is
        idempotent. Returns the number of label cells filled.
        """
        targets = [e for e in self.entries if e.admitted_at < current_task]
        if not targets:
            return 0
        feats = np.stack([e.sample.features for e in targets])
        logits, _, _ = nn.forward(model, feats)
        probs = nn.sigmoid(logits)
        cols = np.array(label_set, dtype=np.intp)
        written = 0
        for row, e in enumerate(targets):
            for j in cols:
                if e.sample.known_mask[j] == 0:
                    e.sample.targets[j] = 1.0 if probs[row, j] > thresholds[j] else 0.0
                    e.sample.known_mask[j] = 1
                    written += 1
        return written

    def dump_csv(self, path: str) -> None:
        """Write the buffer contents for inspection: features, working
        labels, known flags, origin task, admission task."""
        if not self.entries:
            raise StateError("cannot dump an empty buffer")
        d = len(self.entries[0].sample.features)
        n = len(self.entries[0].sample.targets)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [f"feature_{i}" for i in range(d)]
                + [f"label_{j}" for j in range(n)]
                + [f"known_{j}" for j in range(n)]
                + ["origin_task", "admitted_at"]
            )
            for e in self.entries:
                writer.writerow(
                    [f"{v:.17g}" for v in e.sample.features]
                    + [str(int(v)) for v in e.sample.targets]
                    + [str(int(v)) for v in e.sample.known_mask]
                    + [str(e.sample.origin_task), str(e.admitted_at)]
                )


def snapshot_logits(entries: list[BufferEntry], model: nn.MlpModel) -> None:
    """Record the model's current outputs on freshly admitted entries.

    The stored vectors are frozen: later training never updates them.
    """
    if not entries:
        return
    feats = np.stack([e.sample.features for e in entries])
    logits, _, _ = nn.forward(model, feats)
    for e, row in zip(entries, logits):
        e.stored_logits = row.copy()
