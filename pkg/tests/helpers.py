"""Shared fixtures and oracle utilities for the test suite.

Oracles here are written independently of the library internals (plain
loops, direct formulas) so tests cross-check rather than echo the
implementation.
"""

import numpy as np

from mlcl import nn
from mlcl.buffer import ReplayBuffer
from mlcl.stream import Sample


def make_samples(rng, n, n_classes, label_set, input_dim=4, origin_task=0):
    """Tiny synthetic samples supervised only on ``label_set``."""
    out = []
    mask = np.zeros(n_classes, dtype=np.int8)
    mask[list(label_set)] = 1
    for _ in range(n):
        latent = (rng.random(n_classes) < 0.4).astype(np.int8)
        latent[rng.choice(list(label_set))] = 1
        out.append(
            Sample(
                features=rng.normal(size=input_dim),
                targets=(latent * mask).astype(np.float64),
                known_mask=mask.copy(),
                origin_task=origin_task,
                latent=latent,
            )
        )
    return out


def make_stamper(model, thresholds, label_union):
    """Reference label stamper: thresholded predictions, first-write-wins."""

    def stamper(samples):
        if len(label_union) == 0 or not samples:
            return
        feats = np.stack([s.features for s in samples])
        probs = nn.sigmoid(nn.forward(model, feats)[0])
        for i, s in enumerate(samples):
            for j in label_union:
                if s.known_mask[j] == 0:
                    s.targets[j] = 1.0 if probs[i, j] > thresholds[j] else 0.0
                    s.known_mask[j] = 1

    return stamper


def run_random_buffer_sequence(seed):
    """One randomized operation sequence against a small buffer.

    Checks, after every operation: capacity law, per-task quota law,
    monotone mask growth, and that consolidation never edits features or
    positions outside the stamped label set.
    """
    rng = np.random.default_rng(seed)
    n_classes, input_dim = 6, 4
    label_sets = [(0, 1), (2, 3), (4, 5)]
    n_tasks = len(label_sets)
    capacity = int(rng.integers(3, 10))
    buf = ReplayBuffer(capacity=capacity, n_tasks=n_tasks)
    if buf.per_task_quota == 0:
        capacity = n_tasks
        buf = ReplayBuffer(capacity=capacity, n_tasks=n_tasks)
    quota = buf.per_task_quota

    model = nn.init_mlp(input_dim, [5], n_classes, rng)
    thresholds = rng.uniform(0.05, 0.95, size=n_classes)
    pools = [
        make_samples(rng, int(rng.integers(quota, quota + 6)), n_classes, ls,
                     input_dim=input_dim, origin_task=t)
        for t, ls in enumerate(label_sets)
    ]

    mask_history: dict[int, np.ndarray] = {}
    feat_history: dict[int, np.ndarray] = {}

    def check_invariants():
        assert len(buf) <= buf.capacity
        for count in buf.counts_by_task().values():
            assert count <= quota
        for e in buf.entries:
            key = id(e)
            if key in mask_history:
                assert np.all(e.sample.known_mask >= mask_history[key])
                np.testing.assert_array_equal(e.sample.features, feat_history[key])
            mask_history[key] = e.sample.known_mask.copy()
            feat_history[key] = e.sample.features.copy()

    for task_id in range(n_tasks):
        old_union = sorted({j for ls in label_sets[:task_id] for j in ls})
        stamper = make_stamper(model, thresholds, old_union) if rng.random() < 0.5 else None
        buf.admit(pools[task_id], task_id, rng, label_stamper=stamper)
        check_invariants()
        for _ in range(int(rng.integers(0, 4))):
            op = rng.integers(0, 3)
            if op == 0:  # repeated admission attempts must respect quotas
                buf.admit(pools[task_id], task_id, rng)
            elif op == 1:
                before_targets = {
                    id(e): e.sample.targets.copy() for e in buf.entries
                }
                before_known = {id(e): e.sample.known_mask.copy() for e in buf.entries}
                buf.consolidate_backward(
                    model, label_sets[task_id], thresholds, current_task=task_id
                )
                outside = [j for j in range(n_classes) if j not in label_sets[task_id]]
                for e in buf.entries:
                    np.testing.assert_array_equal(
                        e.sample.targets[outside], before_targets[id(e)][outside]
                    )
                    # known positions inside the set are first-write-wins
                    for j in label_sets[task_id]:
                        if before_known[id(e)][j]:
                            assert e.sample.targets[j] == before_targets[id(e)][j]
            else:
                batch = list(rng.choice(pools[task_id], size=4))
                mixed, origins = buf.mix_batch(
                    batch, 0.5, rng, allow_empty=(task_id == 0)
                )
                assert len(mixed) == 4
                assert sum(o is not None for o in origins) <= 2
            check_invariants()
    return buf
