"""Replay buffer: quotas, mixing, stamping, consolidation, and layouts."""

import numpy as np
import pytest

from helpers import make_samples, make_stamper, run_random_buffer_sequence
from mlcl import nn
from mlcl.buffer import ReplayBuffer, capacity_for, snapshot_logits
from mlcl.errors import ConfigError, StateError, ValidationError

N_CLASSES = 6
LABEL_SETS = [(0, 1), (2, 3), (4, 5)]


def fresh(capacity=9, n_tasks=3):
    return ReplayBuffer(capacity=capacity, n_tasks=n_tasks)


def pool(rng, task_id, n=20):
    return make_samples(
        rng, n, N_CLASSES, LABEL_SETS[task_id], input_dim=4, origin_task=task_id
    )


class TestCapacityAndAdmission:
    def test_budget_arithmetic(self):
        # 3% of the default stream: 7 tasks x 1600 train samples.
        assert capacity_for([1600] * 7) == 336
        assert ReplayBuffer(capacity=336, n_tasks=7).per_task_quota == 48
        # A 60-slot buffer over 7 tasks leaves a quota of 8.
        assert ReplayBuffer(capacity=60, n_tasks=7).per_task_quota == 8

    def test_budget_fraction_validated(self):
        with pytest.raises(ConfigError):
            capacity_for([100], fraction=0.0)
        with pytest.raises(ConfigError):
            capacity_for([100], fraction=1.0)

    def test_admit_respects_quota_and_copies(self):
        rng = np.random.default_rng(0)
        buf = fresh()
        samples = pool(rng, 0)
        entries = buf.admit(samples, 0, rng)
        assert len(entries) == buf.per_task_quota == 3
        assert len(buf) == 3
        # Deep copies: mutating the source must not leak into the buffer.
        stored = entries[0].sample.targets.copy()
        for s in samples:
            s.targets[:] = 9.0
        np.testing.assert_array_equal(entries[0].sample.targets, stored)

    def test_readmission_cannot_exceed_quota(self):
        rng = np.random.default_rng(1)
        buf = fresh()
        buf.admit(pool(rng, 0), 0, rng)
        again = buf.admit(pool(rng, 0), 0, rng)
        assert again == []
        assert buf.counts_by_task()[0] == buf.per_task_quota

    def test_capacity_never_exceeded_across_all_tasks(self):
        rng = np.random.default_rng(2)
        buf = fresh(capacity=7, n_tasks=3)  # quota 2, remainder 1
        for t in range(3):
            buf.admit(pool(rng, t), t, rng)
            assert len(buf) <= 7
        assert len(buf) == 6

    def test_quota_larger_than_train_size_rejected(self):
        rng = np.random.default_rng(3)
        buf = fresh(capacity=30, n_tasks=3)  # quota 10
        with pytest.raises(ValidationError):
            buf.admit(pool(rng, 0, n=5), 0, rng)

    def test_admitted_at_recorded(self):
        rng = np.random.default_rng(4)
        buf = fresh()
        entries = buf.admit(pool(rng, 1), 1, rng)
        assert all(e.admitted_at == 1 for e in entries)
        assert all(e.sample.origin_task == 1 for e in entries)

    def test_selection_is_uniform_without_replacement(self):
        rng = np.random.default_rng(5)
        buf = fresh(capacity=15, n_tasks=3)  # quota 5
        entries = buf.admit(pool(rng, 0, n=20), 0, rng)
        keys = {e.sample.features.tobytes() for e in entries}
        assert len(keys) == 5


class TestMixBatch:
    def test_half_and_half(self):
        rng = np.random.default_rng(6)
        buf = fresh()
        buf.admit(pool(rng, 0), 0, rng)
        batch = pool(rng, 1, n=8)
        mixed, origins = buf.mix_batch(batch, 0.5, rng)
        assert len(mixed) == 8
        assert sum(o is not None for o in origins) == 4
        assert sum(o is None for o in origins) == 4
        # Memory rows come from the buffer, current rows from the batch.
        buffered = {e.sample.features.tobytes() for e in buf.entries}
        for s, o in zip(mixed, origins):
            if o is not None:
                assert s.features.tobytes() in buffered

    def test_odd_batch_rounds_toward_current(self):
        rng = np.random.default_rng(7)
        buf = fresh()
        buf.admit(pool(rng, 0), 0, rng)
        mixed, origins = buf.mix_batch(pool(rng, 1, n=5), 0.5, rng)
        assert len(mixed) == 5
        assert sum(o is None for o in origins) == 3  # ceil(0.5 * 5)
        assert sum(o is not None for o in origins) == 2  # floor(0.5 * 5)

    def test_ratio_zero_passthrough(self):
        rng = np.random.default_rng(8)
        buf = fresh()
        buf.admit(pool(rng, 0), 0, rng)
        batch = pool(rng, 1, n=4)
        mixed, origins = buf.mix_batch(batch, 0.0, rng)
        assert mixed == batch
        assert origins == [None] * 4

    def test_empty_buffer_first_task_passthrough(self):
        rng = np.random.default_rng(9)
        buf = fresh()
        batch = pool(rng, 0, n=4)
        mixed, origins = buf.mix_batch(batch, 0.5, rng, allow_empty=True)
        assert mixed == batch and origins == [None] * 4

    def test_empty_buffer_later_task_is_an_error(self):
        rng = np.random.default_rng(10)
        buf = fresh()
        with pytest.raises(StateError):
            buf.mix_batch(pool(rng, 1, n=4), 0.5, rng)

    def test_draw_is_with_replacement(self):
        # One stored entry can fill many memory slots.
        rng = np.random.default_rng(11)
        buf = ReplayBuffer(capacity=3, n_tasks=3)
        buf.admit(pool(rng, 0, n=5), 0, rng)
        assert len(buf) == 1
        mixed, origins = buf.mix_batch(pool(rng, 1, n=8), 0.5, rng)
        assert sum(o is not None for o in origins) == 4


class TestStampingAndConsolidation:
    def setup_method(self):
        self.rng = np.random.default_rng(12)
        self.model = nn.init_mlp(4, [6], N_CLASSES, self.rng)
        self.thresholds = np.full(N_CLASSES, 0.5)

    def predict(self, feats):
        return (nn.sigmoid(nn.forward(self.model, feats)[0]) > self.thresholds).astype(float)

    def test_plain_admission_keeps_origin_mask(self):
        buf = fresh()
        entries = buf.admit(pool(self.rng, 1), 1, self.rng)
        want = np.zeros(N_CLASSES, dtype=np.int8)
        want[list(LABEL_SETS[1])] = 1
        for e in entries:
            np.testing.assert_array_equal(e.sample.known_mask, want)

    def test_stamper_extends_mask_over_old_union(self):
        buf = fresh()
        old_union = [0, 1, 2, 3]
        stamper = make_stamper(self.model, self.thresholds, old_union)
        entries = buf.admit(pool(self.rng, 2), 2, self.rng, label_stamper=stamper)
        for e in entries:
            assert np.all(e.sample.known_mask[[0, 1, 2, 3, 4, 5]] == 1)

    def test_stamped_values_match_direct_recomputation(self):
        buf = fresh()
        old_union = [0, 1, 2, 3]
        stamper = make_stamper(self.model, self.thresholds, old_union)
        entries = buf.admit(pool(self.rng, 2), 2, self.rng, label_stamper=stamper)
        feats = np.stack([e.sample.features for e in entries])
        want = self.predict(feats)
        for row, e in enumerate(entries):
            for j in old_union:
                assert e.sample.targets[j] == want[row, j]

    def test_consolidation_stamps_only_older_entries(self):
        buf = fresh()
        e0 = buf.admit(pool(self.rng, 0), 0, self.rng)
        e1 = buf.admit(pool(self.rng, 1), 1, self.rng)
        written = buf.consolidate_backward(self.model, LABEL_SETS[1], self.thresholds, 1)
        assert written == len(e0) * 2
        for e in e0:
            assert np.all(e.sample.known_mask[list(LABEL_SETS[1])] == 1)
        for e in e1:
            assert np.all(e.sample.known_mask[list(LABEL_SETS[0])] == 0)

    def test_consolidation_matches_direct_recomputation(self):
        buf = fresh()
        entries = buf.admit(pool(self.rng, 0), 0, self.rng)
        buf.consolidate_backward(self.model, LABEL_SETS[2], self.thresholds, 2)
        feats = np.stack([e.sample.features for e in entries])
        want = self.predict(feats)
        for row, e in enumerate(entries):
            for j in LABEL_SETS[2]:
                assert e.sample.targets[j] == want[row, j]

    def test_consolidation_is_first_write_wins(self):
        buf = fresh()
        entries = buf.admit(pool(self.rng, 0), 0, self.rng)
        before = [e.sample.targets.copy() for e in entries]
        # Re-stamping the entries' own known label set must change nothing.
        buf.consolidate_backward(self.model, LABEL_SETS[0], self.thresholds, 1)
        for e, b in zip(entries, before):
            np.testing.assert_array_equal(e.sample.targets[list(LABEL_SETS[0])],
                                          b[list(LABEL_SETS[0])])

    def test_consolidation_is_idempotent(self):
        buf = fresh()
        buf.admit(pool(self.rng, 0), 0, self.rng)
        buf.consolidate_backward(self.model, LABEL_SETS[1], self.thresholds, 1)
        snap = [e.sample.targets.copy() for e in buf.entries]
        again = buf.consolidate_backward(self.model, LABEL_SETS[1], self.thresholds, 1)
        assert again == 0
        for e, s in zip(buf.entries, snap):
            np.testing.assert_array_equal(e.sample.targets, s)

    def test_saturated_negative_model_stamps_zeros(self):
        buf = fresh()
        entries = buf.admit(pool(self.rng, 0), 0, self.rng)
        dead = nn.init_mlp(4, [6], N_CLASSES, self.rng)
        for layer in dead.layers:
            layer.weight[:] = 0.0
        dead.layers[-1].bias[:] = -20.0
        buf.consolidate_backward(dead, LABEL_SETS[1], self.thresholds, 1)
        for e in entries:
            assert np.all(e.sample.targets[list(LABEL_SETS[1])] == 0.0)

    def test_consolidation_never_touches_features(self):
        buf = fresh()
        entries = buf.admit(pool(self.rng, 0), 0, self.rng)
        feats = [e.sample.features.copy() for e in entries]
        buf.consolidate_backward(self.model, LABEL_SETS[1], self.thresholds, 1)
        for e, f in zip(entries, feats):
            np.testing.assert_array_equal(e.sample.features, f)


class TestSnapshotLogits:
    def test_snapshot_matches_forward_bit_exact(self):
        rng = np.random.default_rng(13)
        model = nn.init_mlp(4, [6], N_CLASSES, rng)
        buf = fresh()
        entries = buf.admit(pool(rng, 0), 0, rng)
        snapshot_logits(entries, model)
        feats = np.stack([e.sample.features for e in entries])
        logits, _, _ = nn.forward(model, feats)
        for row, e in enumerate(entries):
            np.testing.assert_array_equal(e.stored_logits, logits[row])

    def test_snapshot_frozen_after_model_changes(self):
        rng = np.random.default_rng(14)
        model = nn.init_mlp(4, [6], N_CLASSES, rng)
        buf = fresh()
        entries = buf.admit(pool(rng, 0), 0, rng)
        snapshot_logits(entries, model)
        saved = [e.stored_logits.copy() for e in entries]
        model.layers[0].weight += 1.0
        for e, s in zip(entries, saved):
            np.testing.assert_array_equal(e.stored_logits, s)

    def test_zero_weight_model_stores_zeros(self):
        rng = np.random.default_rng(15)
        model = nn.init_mlp(4, [6], N_CLASSES, rng)
        for layer in model.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        buf = fresh()
        entries = buf.admit(pool(rng, 0), 0, rng)
        snapshot_logits(entries, model)
        for e in entries:
            np.testing.assert_array_equal(e.stored_logits, np.zeros(N_CLASSES))


class TestLayouts:
    """The three memory layouts from fixed configuration triples."""

    def build(self, with_stamper, with_consolidation, seed=16):
        rng = np.random.default_rng(seed)
        model = nn.init_mlp(4, [6], N_CLASSES, rng)
        thresholds = np.full(N_CLASSES, 0.5)
        buf = fresh()
        for t in range(3):
            old_union = sorted({j for ls in LABEL_SETS[:t] for j in ls})
            stamper = (
                make_stamper(model, thresholds, old_union) if with_stamper else None
            )
            buf.admit(pool(rng, t), t, rng, label_stamper=stamper)
            if with_consolidation:
                buf.consolidate_backward(model, LABEL_SETS[t], thresholds, t)
        return buf

    def test_plain_layout(self):
        buf = self.build(with_stamper=False, with_consolidation=False)
        for e in buf.entries:
            want = np.zeros(N_CLASSES, dtype=np.int8)
            want[list(LABEL_SETS[e.sample.origin_task])] = 1
            np.testing.assert_array_equal(e.sample.known_mask, want)

    def test_forward_stamped_layout(self):
        buf = self.build(with_stamper=True, with_consolidation=False)
        for e in buf.entries:
            upto = sorted({j for ls in LABEL_SETS[: e.admitted_at + 1] for j in ls})
            want = np.zeros(N_CLASSES, dtype=np.int8)
            want[upto] = 1
            np.testing.assert_array_equal(e.sample.known_mask, want)

    def test_fully_consolidated_layout(self):
        buf = self.build(with_stamper=True, with_consolidation=True)
        for e in buf.entries:
            assert np.all(e.sample.known_mask == 1)

    def test_memory_footprint_matches_plain_replay(self):
        # Stamping and consolidation rewrite labels in place; entry count
        # and feature storage are identical to the plain layout.
        plain = self.build(with_stamper=False, with_consolidation=False)
        full = self.build(with_stamper=True, with_consolidation=True)
        assert len(plain) == len(full)
        assert all(e.stored_logits is None for e in full.entries)
        assert sum(e.sample.features.size for e in plain.entries) == sum(
            e.sample.features.size for e in full.entries
        )


class TestRandomizedInvariants:
    def test_thousand_random_sequences(self):
        for seed in range(1000):
            run_random_buffer_sequence(seed)


class TestDump:
    def test_dump_csv_layout(self, tmp_path):
        rng = np.random.default_rng(17)
        buf = fresh()
        buf.admit(pool(rng, 0), 0, rng)
        path = tmp_path / "buffer.csv"
        buf.dump_csv(str(path))
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0].endswith("origin_task,admitted_at")
        assert len(lines) == 1 + len(buf)

    def test_dump_empty_is_an_error(self, tmp_path):
        with pytest.raises(StateError):
            fresh().dump_csv(str(tmp_path / "x.csv"))
