"""Task-stream construction for new-instances-and-new-classes benchmarks.

A stream is a sequence of tasks over a shared class vocabulary. Each task
either introduces classes never seen before or re-presents an earlier
task's label set under a shifted input distribution (a new domain). The
synthetic generator draws multi-label samples from class prototypes with a
co-occurrence model, so samples can carry hidden positives for classes
outside the task's label set, mirroring partially-labeled real data.

A CSV manifest path is also provided so externally extracted feature
datasets can be plugged into the same harness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ManifestError, ValidationError

DEFAULT_N_CLASSES = 19
DEFAULT_INPUT_DIM = 32
DEFAULT_SAMPLES_PER_TASK = 2000
DEFAULT_PROTOTYPE_RANK = 6


@dataclass
class TaskSpec:
    task_id: int
    label_set: tuple[int, ...]  # class indices supervised in this task
    domain_id: int
    n_samples: int

    def __post_init__(self):
        if not self.label_set:
            raise ConfigError("task label_set must be nonempty")
        if self.n_samples <= 0:
            raise ConfigError("task n_samples must be positive")


@dataclass
class DomainTransform:
    """Per-feature affine shift plus additive noise, applied to inputs only."""

    scale: np.ndarray
    offset: np.ndarray
    noise_std: float

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ConfigError("domain scale entries must be positive")
        if self.noise_std <= 0:
            raise ConfigError("domain noise_std must be positive")


@dataclass
class Sample:
    """One observation flowing through training, buffers, and metrics.

    ``targets`` is the working label vector seen by training; it is only
    trusted where ``known_mask`` is 1. ``latent`` keeps the full true label
    vector for oracle evaluation and diagnostics; training code must never
    read it.
    """

    features: np.ndarray
    targets: np.ndarray
    known_mask: np.ndarray
    origin_task: int
    latent: np.ndarray

    def copy(self) -> "Sample":
        return Sample(
            features=self.features.copy(),
            targets=self.targets.copy(),
            known_mask=self.known_mask.copy(),
            origin_task=self.origin_task,
            latent=self.latent.copy(),
        )


@dataclass
class TaskDataset:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    task: TaskSpec


@dataclass(eq=False)
class StreamSpec:
    """Everything that determines a stream: topology plus generator state."""

    n_classes: int
    input_dim: int
    tasks: list[TaskSpec]
    domains: list[DomainTransform]
    seed: int
    base_rates: np.ndarray  # per-class positive rate
    prototypes: np.ndarray  # (n_classes, input_dim)
    offtask_rate_scale: float = 1.0  # 0 disables co-occurrence entirely

    def __post_init__(self):
        covered = sorted({j for t in self.tasks for j in t.label_set})
        if covered != list(range(self.n_classes)):
            raise ConfigError("task label sets must cover exactly 0..n_classes-1")
        for t in self.tasks:
            if not 0 <= t.domain_id < len(self.domains):
                raise ConfigError(f"task {t.task_id} references unknown domain {t.domain_id}")

    def label_sets(self) -> list[tuple[int, ...]]:
        return [t.label_set for t in self.tasks]

    def old_label_union(self, task_id: int) -> np.ndarray:
        """Sorted union of label sets of tasks strictly before ``task_id``."""
        old = sorted({j for t in self.tasks[:task_id] for j in t.label_set})
        return np.array(old, dtype=np.intp)

    def domain_scope(self, domain_id: int) -> np.ndarray:
        """Sorted union of label sets of every task in the given domain."""
        scope = sorted({j for t in self.tasks if t.domain_id == domain_id for j in t.label_set})
        return np.array(scope, dtype=np.intp)


# The default stream mirrors a seven-task, nineteen-class, two-domain layout:
# three new-class tasks in domain A, then domain B alternating re-presented
# label sets (pure input shift) with new-class tasks.
_DEFAULT_TOPOLOGY = [
    # (label_set, domain_id)
    ((0, 1, 2, 3), 0),
    ((4, 5, 6, 7), 0),
    ((8, 9, 10, 11), 0),
    ((0, 1, 2, 3), 1),  # domain shift of task 0
    ((12, 13, 14, 15), 1),
    ((4, 5, 6, 7), 1),  # domain shift of task 1
    ((16, 17, 18), 1),
]


def build_default_stream(
    seed: int,
    n_samples_per_task: int = DEFAULT_SAMPLES_PER_TASK,
    input_dim: int = DEFAULT_INPUT_DIM,
    offtask_rate_scale: float = 1.0,
) -> StreamSpec:
    """Seven tasks over nineteen classes and two domains.

    Class base rates are drawn in [0.02, 0.15], with the first task's
    classes assigned the smallest rates so they rarely recur in later
    tasks. Domain A is identity plus noise; domain B applies a per-feature
    affine shift. Fully determined by ``seed``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1A55]))
    n_classes = DEFAULT_N_CLASSES

    rates = np.sort(rng.uniform(0.02, 0.15, size=n_classes))
    base_rates = np.empty(n_classes)
    first_task = _DEFAULT_TOPOLOGY[0][0]
    rest = [j for j in range(n_classes) if j not in first_task]
    base_rates[list(first_task)] = rates[: len(first_task)]
    base_rates[rng.permutation(np.array(rest))] = rates[len(first_task) :]

    # Class prototypes live in a shared low-dimensional subspace. With many
    # more classes than subspace directions, tasks compete for the same
    # feature directions, so sequential training interferes instead of
    # settling into disjoint solutions; this is what gives the stream real
    # forgetting pressure while keeping every task learnable.
    rank = min(DEFAULT_PROTOTYPE_RANK, input_dim)
    basis = np.linalg.qr(rng.normal(size=(input_dim, rank)))[0]
    prototypes = rng.normal(size=(n_classes, rank)) @ basis.T
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    domains = [
        DomainTransform(scale=np.ones(input_dim), offset=np.zeros(input_dim), noise_std=0.05),
        DomainTransform(
            scale=rng.uniform(0.5, 1.5, size=input_dim),
            offset=rng.uniform(-0.5, 0.5, size=input_dim),
            noise_std=0.05,
        ),
    ]
    tasks = [
        TaskSpec(task_id=i, label_set=labels, domain_id=dom, n_samples=n_samples_per_task)
        for i, (labels, dom) in enumerate(_DEFAULT_TOPOLOGY)
    ]
    return StreamSpec(
        n_classes=n_classes,
        input_dim=input_dim,
        tasks=tasks,
        domains=domains,
        seed=seed,
        base_rates=base_rates,
        prototypes=prototypes,
        offtask_rate_scale=offtask_rate_scale,
    )


def _draw_latents(spec: StreamSpec, task: TaskSpec, n: int, rng: np.random.Generator):
    """Latent multi-label vectors from the co-occurrence model: one label
    from the task's label set forced positive (uniformly chosen), every
    other class independent at its base rate, with off-task rates scaled by
    ``offtask_rate_scale``. The forced positive guarantees the task
    selection rule: only samples showing an on-task class are retained."""
    label_set = np.array(task.label_set, dtype=np.intp)
    on_task = np.zeros(spec.n_classes, dtype=bool)
    on_task[label_set] = True
    probs = np.where(on_task, spec.base_rates, spec.base_rates * spec.offtask_rate_scale)

    latents = (rng.random((n, spec.n_classes)) < probs).astype(np.int8)
    forced = rng.integers(0, len(label_set), size=n)
    latents[np.arange(n), label_set[forced]] = 1
    return latents


def features_for_latents(
    spec: StreamSpec, latents: np.ndarray, domain_id: int, rng: np.random.Generator
) -> np.ndarray:
    """Prototype superposition followed by the domain's affine transform and
    additive noise. Targets never depend on the domain."""
    dom = spec.domains[domain_id]
    x = latents.astype(np.float64) @ spec.prototypes
    x = x * dom.scale + dom.offset
    x += rng.normal(scale=dom.noise_std, size=x.shape)
    return x


def generate_task_data(spec: StreamSpec, task_id: int, rng: np.random.Generator) -> TaskDataset:
    """Draw one task's samples and split them 80/10/10.

    Every sample has at least one positive in the task's label set (the
    selection rule for task membership). ``known_mask`` is exactly the
    task's label-set indicator; true label values outside the mask are kept
    on the sample's ``latent`` field for oracle use only.
    """
    if not 0 <= task_id < len(spec.tasks):
        raise ConfigError(f"task_id {task_id} out of range")
    task = spec.tasks[task_id]
    latents = _draw_latents(spec, task, task.n_samples, rng)
    x = features_for_latents(spec, latents, task.domain_id, rng)

    mask = np.zeros(spec.n_classes, dtype=np.int8)
    mask[list(task.label_set)] = 1
    samples = [
        Sample(
            features=x[i],
            targets=(latents[i] * mask).astype(np.float64),
            known_mask=mask.copy(),
            origin_task=task_id,
            latent=latents[i].copy(),
        )
        for i in range(task.n_samples)
    ]
    train, val, test = split_dataset(samples, rng=rng)
    return TaskDataset(train=train, val=val, test=test, task=task)


def split_dataset(
    samples: list[Sample],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    rng: np.random.Generator | None = None,
):
    """Shuffled, disjoint, exhaustive train/val/test split."""
    n = len(samples)
    if n < 10:
        raise ValidationError(f"need at least 10 samples to split, got {n}")
    if rng is None:
        rng = np.random.default_rng()
    order = rng.permutation(n)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


def joint_view(spec: StreamSpec, datasets: list[TaskDataset]) -> list[TaskDataset]:
    """Re-label copies of every dataset with full supervision over the
    sample's domain scope (the union of label sets of that domain's tasks).

    This is the upper-baseline view: within a domain, every label that
    domain ever supervises is revealed from the latent truth. Classes
    outside the domain's scope stay hidden, as they would be for a dataset
    that was never annotated for them.
    """
    out = []
    for ds, task in zip(datasets, spec.tasks):
        scope = spec.domain_scope(task.domain_id)
        mask = np.zeros(spec.n_classes, dtype=np.int8)
        mask[scope] = 1

        def relabel(samples: list[Sample]) -> list[Sample]:
            new = []
            for s in samples:
                c = s.copy()
                c.known_mask = mask.copy()
                c.targets = (c.latent * mask).astype(np.float64)
                new.append(c)
            return new

        out.append(
            TaskDataset(
                train=relabel(ds.train), val=relabel(ds.val), test=relabel(ds.test), task=task
            )
        )
    return out


# ---------------------------------------------------------------------------
# CSV manifests
# ---------------------------------------------------------------------------

_SPLITS = ("train", "val", "test")


def manifest_header(input_dim: int, n_classes: int) -> list[str]:
    return (
        [f"feature_{i}" for i in range(input_dim)]
        + [f"label_{j}" for j in range(n_classes)]
        + [f"known_{j}" for j in range(n_classes)]
        + ["split"]
    )


def save_manifest(dataset: TaskDataset, path: str) -> None:
    """Write a task dataset to the manifest CSV format (UTF-8, header row).

    Floats are written with 17 significant digits so reloading reproduces
    the exact float64 values.
    """
    some = dataset.train[0]
    d, n = len(some.features), len(some.targets)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(manifest_header(d, n))
        for split_name, samples in zip(_SPLITS, (dataset.train, dataset.val, dataset.test)):
            for s in samples:
                row = (
                    [f"{v:.17g}" for v in s.features]
                    + [str(int(v)) for v in s.targets]
                    + [str(int(v)) for v in s.known_mask]
                    + [split_name]
                )
                writer.writerow(row)


def load_manifest(path: str, task_id: int = 0, domain_id: int = 0) -> TaskDataset:
    """Parse a manifest CSV into a task dataset.

    The header fixes the feature and class dimensions; every row must
    conform. The task's label set is inferred as the union of columns whose
    ``known`` flag is set on any row. Malformed content raises
    :class:`ManifestError` naming the offending line.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("empty file", line=1) from None

        d = sum(1 for c in header if c.startswith("feature_"))
        n = sum(1 for c in header if c.startswith("label_"))
        if d == 0 or n == 0:
            raise ManifestError("header must declare feature_* and label_* columns", line=1)
        expected = manifest_header(d, n)
        if header != expected:
            missing = [c for c in expected if c not in header]
            if missing:
                raise ManifestError(f"missing column {missing[0]!r}", line=1)
            raise ManifestError("unexpected column layout", line=1)

        splits: dict[str, list[Sample]] = {s: [] for s in _SPLITS}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ManifestError(
                    f"expected {len(expected)} fields, got {len(row)}", line=lineno
                )
            try:
                feats = np.array([float(v) for v in row[:d]])
            except ValueError as exc:
                raise ManifestError(f"bad feature value ({exc})", line=lineno) from None
            labels = _parse_binary(row[d : d + n], "label", lineno)
            known = _parse_binary(row[d + n : d + 2 * n], "known", lineno)
            split = row[-1]
            if split not in _SPLITS:
                raise ManifestError(f"split must be one of {_SPLITS}, got {split!r}", line=lineno)
            splits[split].append(
                Sample(
                    features=feats,
                    targets=labels.astype(np.float64),
                    known_mask=known,
                    origin_task=task_id,
                    latent=labels.copy(),
                )
            )

    rows = sum(len(v) for v in splits.values())
    if rows == 0:
        raise ManifestError("manifest has no data rows", line=2)
    label_union = sorted(
        {j for samples in splits.values() for s in samples for j in np.flatnonzero(s.known_mask)}
    )
    if not label_union:
        raise ManifestError("no known labels anywhere in the manifest", line=2)
    task = TaskSpec(
        task_id=task_id, label_set=tuple(label_union), domain_id=domain_id, n_samples=rows
    )
    return TaskDataset(train=splits["train"], val=splits["val"], test=splits["test"], task=task)


def _parse_binary(fields: list[str], what: str, lineno: int) -> np.ndarray:
    out = np.empty(len(fields), dtype=np.int8)
    for i, v in enumerate(fields):
        if v == "0":
            out[i] = 0
        elif v == "1":
            out[i] = 1
        else:
            raise ManifestError(f"{what}_{i} must be 0 or 1, got {v!r}", line=lineno)
    return out
