
# coding: utf-8

# # Every training mode on one small benchmark
#
# Each mode is a config field, nothing else. The shipped configs in `configs/` use the full benchmark and 40 epochs; here everything is cut down so the whole sweep takes well under a minute.

# In[1]:

from ltd_retrieval import DatasetSpec, ExperimentConfig, generate_dataset, train
from ltd_retrieval.config import MODES

data = generate_dataset(DatasetSpec(n_train=200, n_test=100, seed=2))
small = dict(epochs=3, batch_size=32, hidden=32, d_joint=16)


# In[2]:

results = {}
for mode in MODES:
    config = ExperimentConfig(mode=mode, base_lr=0.2 if mode.startswith("itd") else 0.5, **small)
    results[mode] = train(config, *data).metrics
for mode, report in results.items():
    print(f"{mode:18s} rsum {report.rsum:.3f}  multi-positive rsum {report.multi.rsum:.3f}")


# The triplet variant switches on BatchNorm in both heads and turns SWA off.

# In[3]:

triplet = ExperimentConfig(mode="ltd_lagrange", loss="triplet", **small)
print(triplet.batchnorm, triplet.swa_enabled)
print(train(triplet, *data).metrics.rsum)


# Evaluating a saved checkpoint reproduces the report exactly. Decoders are not needed for evaluation.

# In[4]:

import tempfile
from pathlib import Path

from ltd_retrieval import evaluate

with tempfile.TemporaryDirectory() as tmp:
    run = train(ExperimentConfig(mode="ltd_dual", **small), *data, out_dir=tmp)
    again = evaluate(Path(tmp) / "swa_checkpoint.bin", data[1], data[2], None)
    print(sorted(p.name for p in Path(tmp).iterdir()))
    print(again.to_json() == run.metrics.to_json())
