
# coding: utf-8

# # Ranking metrics
#
# Candidates are sorted by cosine similarity, ties broken by the lower index. A query scores a hit at k when its best-ranked relevant candidate is in the top k.

# In[1]:

import numpy as np

from ltd_retrieval.data import RelevanceAnnotations
from ltd_retrieval.linalg import SeededRng
from ltd_retrieval.metrics import r_precision, rank_candidates, recall_at_k, score_retrieval


# Ties: the two identical candidates come out in index order.

# In[2]:

q = np.array([[1.0, 0.0]])
c = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
print(rank_candidates(q, c))


# Four queries whose match sits at ranks 1, 3, 6 and 11: recall@5 is one half.

# In[3]:

def ranking_with_match_at(ranks, n):
    rows = []
    for r in ranks:
        rest = list(range(1, n))
        rows.append(rest[: r - 1] + [0] + rest[r - 1:])
    return np.array(rows)

ranking = ranking_with_match_at([1, 3, 6, 11], 12)
print([recall_at_k(ranking, [[0]] * 4, k) for k in (1, 5, 10)])


# R-precision with three relevant items, two of them in the top three.

# In[4]:

print(r_precision(np.array([[4, 0, 2, 1, 3]]), [[4, 2, 3]]))


# Scoring both directions at once. Extra positives can only help, so the multi-positive numbers dominate.

# In[5]:

rng = SeededRng(0)
images, captions = rng.unit_vectors(10, 8), rng.unit_vectors(20, 8)
single = RelevanceAnnotations([np.array([2 * i, 2 * i + 1]) for i in range(10)],
                              [np.array([j // 2]) for j in range(20)], "single")
multi = RelevanceAnnotations([np.r_[s, (s[0] + 2) % 20] for s in single.i2t],
                             [np.array([j // 2, (j // 2 + 1) % 10]) for j in range(20)], "multi")
s, m = score_retrieval(images, captions, single), score_retrieval(images, captions, multi)
print(s.rsum, m.rsum)
