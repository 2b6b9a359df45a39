"""The whole benchmark in one call, at reduced size.

Runs all eight strategies over three seeds of a smaller stream and prints
the aggregate table: joint training on top, fine-tuning at the bottom,
and the masked replay strategy closest to joint among the rest.

The full-size equivalent (2000 samples per task, five seeds, ten epochs)
is what `mlcl run demos/benchmark.json` executes; it writes summary.csv,
curves.csv, records/*.json, and timings.csv under --output-dir and takes
a couple of minutes on a laptop CPU.
"""

import tempfile

from mlcl.harness import ExperimentConfig, run_experiment
from mlcl.strategies import STRATEGY_KINDS

config = ExperimentConfig.from_dict(
    {
        "stream": {"n_samples_per_task": 800},
        "strategies": list(STRATEGY_KINDS),
        "seeds": [0, 1, 2],
        "epochs_per_task": 8,
        "output_dir": tempfile.mkdtemp(prefix="mlcl_demo_"),
    }
)
result = run_experiment(config)

print()
print(result.table.format())
print(f"\nresult files under {config.output_dir}:")
for name in ("summary.csv", "curves.csv", "timings.csv", "records/"):
    print(f"  {name}")
