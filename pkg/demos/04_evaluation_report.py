"""Evaluation metrics and report emitters.

Scores a briefly trained 16-px model against its zero-filled inputs on
two tasks, aggregates per-image PSNR/SSIM into grouped means, and prints
the CSV and Markdown reports the evaluation CLI writes.
"""

import itertools

from mript.cli import evaluate_model
from mript.dataio import build_samples, phantom_set
from mript.degradation import MaskFamily, MaskSpec
from mript.metrics import aggregate_report, emit_csv, emit_markdown
from mript.model import MRIPT, tiny_config
from mript.training import TrainConfig, train

train_pool = phantom_set(6, 16, seed=4)
held_out = phantom_set(4, 16, seed=10004)
tasks = [MaskSpec(MaskFamily.CARTESIAN_RANDOM, 2.0),
         MaskSpec(MaskFamily.CARTESIAN_EQUISPACED, 4.0)]

model = MRIPT(tiny_config(), init_seed=0)
samples = list(build_samples(train_pool, tasks, seed=0))
train(model, itertools.cycle(samples),
      TrainConfig(learning_rate=1e-3, batch_size=2, max_steps=300, seed=0),
      mode="pretrain")

results = []
for task in tasks:
    results += evaluate_model(model, held_out, task, seed=42)

report = aggregate_report(results)
print("CSV:\n")
print(emit_csv(report))
print("Markdown:\n")
print(emit_markdown(report))
