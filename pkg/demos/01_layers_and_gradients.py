
# coding: utf-8

# # Layers and hand-written gradients
#
# Every layer in `ltd_retrieval.nn` caches what it needs in `forward` and returns the input gradient from `backward`, adding parameter gradients into `Parameter.grad`. Here we poke at a few layers and then compare their gradients with central differences.

# In[1]:

import numpy as np

from ltd_retrieval.linalg import SeededRng, l2_normalize, stable_softmax
from ltd_retrieval.nn import Linear, ReLU, ProjectionHead, GRU, finite_difference_check
from ltd_retrieval.gradcheck import run_suite


# Normalization and softmax first. Softmax subtracts the max, so huge logits are fine.

# In[2]:

print(l2_normalize([3.0, 4.0]))
print(stable_softmax([1000.0, 1000.0]), stable_softmax([1.0, 0.0]))


# A seeded generator drives every random draw. `fork` derives independent child streams, so adding a draw in one place never shifts another.

# In[3]:

rng = SeededRng(0)
print(rng.fork(1).normal(size=3))
print(SeededRng(0).fork(1).normal(size=3))  # same numbers


# ReLU gates the upstream gradient by the sign of its input.

# In[4]:

relu = ReLU()
print(relu.forward(np.array([[-1.0, 2.0]])))
print(relu.backward(np.array([[5.0, 5.0]])))


# The projection head maps onto the unit sphere: Linear, ReLU, Linear, then row normalization.

# In[5]:

head = ProjectionHead(6, 16, 4, rng.fork(2))
z = head.forward(rng.normal(size=(5, 6)))
print(np.linalg.norm(z, axis=1))


# A GRU over a padded batch. Padded steps copy the previous state, so the last column holds each sequence's final state.

# In[6]:

gru = GRU(3, 4, rng.fork(3))
x = rng.normal(size=(2, 4, 3))
mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
states = gru.forward(x, mask)
print(np.allclose(states[1, -1], states[1, 1]))


# ## Checking a gradient by hand
#
# `finite_difference_check` takes a closure that runs forward (and backward on request) plus the parameters to perturb.

# In[7]:

lin = Linear(4, 3, rng.fork(4))
data = rng.normal(size=(6, 4))

def quadratic(backward):
    y = lin.forward(data)
    if backward:
        lin.backward(y)
    else:
        lin.clear_cache()
    return 0.5 * float(np.sum(y * y))

report = finite_difference_check(quadratic, lin.named_parameters(), tolerance=1e-6)
print(report.passed, report.max_error)


# Scaling the analytic gradient by 1.1 is caught: the relative error is 0.1 / 1.1.

# In[8]:

def scaled(backward):
    y = lin.forward(data)
    if backward:
        lin.backward(1.1 * y)
    else:
        lin.clear_cache()
    return 0.5 * float(np.sum(y * y))

print(finite_difference_check(scaled, lin.named_parameters()).max_error)


# ## The full suite
#
# The same check runs over every layer, encoder, decoder and loss chain. This is what `ltd-retrieval grad-check` prints.

# In[9]:

result = run_suite(seed=0, instances_per_case=2)
for line in result.summary_lines():
    print(line)
print(result.n_instances, "instances, max relative error", f"{result.max_error:.2e}")
