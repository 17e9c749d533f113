
# coding: utf-8

# # The reconstruction bound and its multiplier
#
# Training minimizes `l_con + lam * (l_rec / eta - 1)`. After each descent step the multiplier takes one ascent step with momentum and dampening, clipped to [0, 100].

# In[1]:

import numpy as np

from ltd_retrieval import DatasetSpec, ExperimentConfig, generate_dataset, train
from ltd_retrieval.constraint import LagrangeState, update_lambda


# One step by hand: `l_rec = 0.4` against `eta = 0.2` gives `g = 1`, velocity 0.1 and lambda 1.0005.

# In[2]:

print(update_lambda(LagrangeState(lam=1.0, eta=0.2), 0.4))


# Feed in a made-up reconstruction loss that starts above the bound and drops below it. Lambda keeps climbing while the bound is violated and decays to zero once it holds.

# In[3]:

state = LagrangeState(lam=1.0, eta=0.2)
trace = []
for step in range(14000):
    l_rec = 0.5 if step < 2000 else 0.1
    state = update_lambda(state, l_rec)
    trace.append(state.lam)
print(trace[0], max(trace), trace[-1])


# ## A real run
#
# A small benchmark, 24 epochs. The step log holds one row per step with the contrastive loss, the reconstruction loss, lambda and the learning rate.

# In[4]:

data = generate_dataset(DatasetSpec(n_train=300, n_test=100, seed=1))
config = ExperimentConfig(mode="ltd_lagrange", eta=0.2, epochs=24, batch_size=32)
run = train(config, *data)
print(run.step_log_csv().splitlines()[:3])


# Per-epoch means. Lambda climbs while `l_rec` is above `eta` and levels off once the decoder reaches the bound. With the small ascent rate it then decays only slowly; on the full benchmark it is back near zero by the end of training.

# In[5]:

epoch = run.column("epoch")
for e in range(0, config.epochs, 3):
    sel = epoch == e
    print(e, round(run.column("l_rec")[sel].mean(), 4), round(run.column("lambda")[sel].mean(), 4))


# The same benchmark with an unreachable bound: lambda keeps growing.

# In[6]:

tight = train(config.with_overrides(eta=0.001), data[0])
print(tight.column("lambda")[-1], tight.column("l_rec")[-50:].mean())
