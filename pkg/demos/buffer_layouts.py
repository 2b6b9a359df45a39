"""The three replay-memory layouts.

The same buffer class produces three label layouts depending on the
configuration triple (admit, forward stamping, backward consolidation):

  plain          entries keep only their origin task's labels
  forward        entries admitted later also carry earlier tasks' labels,
                 stamped from the previous model's thresholded predictions
  consolidated   after each task the new labels are written back onto
                 older entries, so every entry ends fully labeled

Label storage is the only difference; features and entry counts match.
"""

import numpy as np

from mlcl import nn
from mlcl.buffer import ReplayBuffer
from mlcl.stream import Sample

rng = np.random.default_rng(5)
n_classes = 6
label_sets = [(0, 1), (2, 3), (4, 5)]
model = nn.init_mlp(4, [6], n_classes, rng)
thresholds = np.full(n_classes, 0.5)


def pool(task_id, n=8):
    mask = np.zeros(n_classes, dtype=np.int8)
    mask[list(label_sets[task_id])] = 1
    out = []
    for _ in range(n):
        latent = (rng.random(n_classes) < 0.4).astype(np.int8)
        latent[rng.choice(list(label_sets[task_id]))] = 1
        out.append(
            Sample(
                features=rng.normal(size=4),
                targets=(latent * mask).astype(np.float64),
                known_mask=mask.copy(),
                origin_task=task_id,
                latent=latent,
            )
        )
    return out


def stamper_for(old_union):
    def stamper(samples):
        if not old_union:
            return
        feats = np.stack([s.features for s in samples])
        probs = nn.sigmoid(nn.forward(model, feats)[0])
        for i, s in enumerate(samples):
            for j in old_union:
                if s.known_mask[j] == 0:
                    s.targets[j] = float(probs[i, j] > thresholds[j])
                    s.known_mask[j] = 1
    return stamper


def build(with_stamper, with_consolidation):
    buf = ReplayBuffer(capacity=6, n_tasks=3)
    for t, label_set in enumerate(label_sets):
        old_union = sorted({j for ls in label_sets[:t] for j in ls})
        buf.admit(
            pool(t), t, rng,
            label_stamper=stamper_for(old_union) if with_stamper else None,
        )
        if with_consolidation:
            buf.consolidate_backward(model, label_set, thresholds, t)
    return buf


for name, flags in [
    ("plain replay", (False, False)),
    ("forward stamping", (True, False)),
    ("forward + backward consolidation", (True, True)),
]:
    buf = build(*flags)
    print(f"\n{name}: known-label mask per entry (rows sorted by origin task)")
    for e in sorted(buf.entries, key=lambda e: e.sample.origin_task):
        row = "".join("x" if k else "." for k in e.sample.known_mask)
        print(f"  origin {e.sample.origin_task}  admitted {e.admitted_at}  [{row}]")
