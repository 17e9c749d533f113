
# coding: utf-8

# # Contrastive and reconstruction losses

# In[1]:

import math

import numpy as np

from ltd_retrieval.linalg import SeededRng
from ltd_retrieval.losses import (
    cosine_reconstruction,
    infonce,
    infonce_grad_closed_form,
    token_nll,
    triplet_hardest,
)
from ltd_retrieval.constraint import LagrangeState, lagrangian_objective
from ltd_retrieval.losses import dual_objective


# ## InfoNCE
#
# One query, one positive, one negative, temperature 1. The loss is `-log(e / (e + 1))`.

# In[2]:

q = np.array([[1.0, 0.0]])
c = np.array([[1.0, 0.0], [0.0, 1.0]])
out = infonce(q, c, tau=1.0, positives=[0])
print(out.value, -math.log(math.e / (math.e + 1)))


# The gradient written out per query agrees with the vectorized backward pass. A batch of one has no negatives and zero loss.

# In[3]:

rng = SeededRng(0)
q, c = rng.unit_vectors(8, 16), rng.unit_vectors(8, 16)
out = infonce(q, c)
dq, dc = infonce_grad_closed_form(q, c)
print(np.abs(out.grad - dq).max(), np.abs(out.grad_other - dc).max())
print(infonce(q[:1], c[:1]).value)


# Training uses both directions and averages them.

# In[4]:

print(infonce(q, c, bidirectional=True).value, 0.5 * (infonce(q, c).value + infonce(c, q).value))


# ## Triplet loss with the hardest negative
#
# Margin 0.2. A positive at 0.5 against a negative at 0.6 costs 0.3.

# In[5]:

s = 0.5
queries = np.array([[1.0, 0.0], [1.0, 0.0]])
cands = np.array([[s, math.sqrt(1 - s * s)], [0.6, -0.8]])
print(triplet_hardest(queries, cands, margin=0.2, bidirectional=False).value)  # (0.3 + 0.1) / 2


# ## Reconstruction losses
#
# The latent-target decoder is scored by `1 - cos`, averaged over rows: 0 for a match, 1 when orthogonal, 2 when opposite.

# In[6]:

y = rng.unit_vectors(3, 5)
print([cosine_reconstruction(p, y).value for p in (y, -y)])


# The token decoder is scored by the negative log-likelihood summed over each caption's tokens. Uniform logits over 4 tokens for 2 steps give `2 ln 4`.

# In[7]:

print(token_nll([np.zeros((2, 4))], [[1, 3]]).value, 2 * math.log(4))


# ## Combining the two
#
# A fixed weight, versus a bound enforced by a multiplier. At `l_rec = eta` the Lagrangian equals the contrastive loss.

# In[8]:

print(dual_objective(1.0, 0.5, beta=1.0))
print(lagrangian_objective(1.0, 0.4, LagrangeState(lam=2.0, eta=0.2)))
print(lagrangian_objective(1.0, 0.2, LagrangeState(lam=2.0, eta=0.2)).value)
