"""Catastrophic forgetting, and what the masked replay strategy does about it.

Trains plain fine-tuning and the replay-with-label-propagation strategy on
the same reduced stream, then prints each task's macro F1 right after its
training and again at the end of the stream. Fine-tuning's zeros-for-unknown
targets erase earlier tasks; the masked strategy keeps them alive.
"""

import numpy as np

from mlcl import nn
from mlcl.buffer import capacity_for
from mlcl.harness import rng_for
from mlcl.metrics import evaluate_model
from mlcl.strategies import StrategyConfig, init_strategy_state, train_task
from mlcl.stream import build_default_stream, generate_task_data

seed = 0
spec = build_default_stream(seed, n_samples_per_task=800)
datasets = [generate_task_data(spec, t, rng_for(seed, "data", t)) for t in range(7)]
capacity = capacity_for([len(ds.train) for ds in datasets])

for kind in ("finetune", "rclp"):
    config = StrategyConfig(kind, epochs_per_task=8)
    model = nn.init_mlp(spec.input_dim, [64, 64], spec.n_classes, rng_for(seed, "init"))
    state = init_strategy_state(
        config, model, spec.n_classes, buffer_capacity=capacity, n_tasks=7
    )
    rng = rng_for(seed, "train", kind)

    just_after, final = [], []
    for t, dataset in enumerate(datasets):
        train_task(state, dataset, rng)
        thr = state.thresholds.h if state.thresholds is not None else 0.5
        just_after.append(evaluate_model(state.model, dataset, thr, t).macro_f1)
    thr = state.thresholds.h if state.thresholds is not None else 0.5
    for t, dataset in enumerate(datasets):
        final.append(evaluate_model(state.model, dataset, thr, 6).macro_f1)

    print(f"\n{kind}: per-task macro F1")
    print("  task        " + "  ".join(f"{t:5d}" for t in range(7)))
    print("  just after  " + "  ".join(f"{v:.3f}" for v in just_after))
    print("  stream end  " + "  ".join(f"{v:.3f}" for v in final))
    drops = [
        100.0 * (a - b) / a if a > 0 else float("nan")
        for a, b in zip(just_after[:-1], final[:-1])
    ]
    print("  forgetting  " + "  ".join(f"{d:4.0f}%" for d in drops) + "   (last task excluded)")
