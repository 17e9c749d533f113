
# coding: utf-8

# # The synthetic shortcut benchmark
#
# Each sample has a few active attributes. The image is a noisy linear map of them plus a small "shortcut" block. Captions name some of the attributes and, during training, also carry a token unique to their image. That token and the image block identify the pair without any semantics. At test time both are replaced by noise.

# In[1]:

import numpy as np

from ltd_retrieval.data import (
    DatasetSpec,
    epoch_batches,
    generate_dataset,
    semantic_tokens,
    shortcut_probe_accuracy,
)

spec = DatasetSpec(n_train=200, n_test=50, seed=0)
train, test, annotations = generate_dataset(spec)
print(len(train), train.n_captions, spec.vocab_size)


# A training image and its captions. Token ids below 32 are attributes; the large one is the shortcut.

# In[2]:

print("attributes", train.attributes[7])
print(train.captions[7])


# A nearest-prototype probe that looks only at the shortcut block identifies almost every training pair.

# In[3]:

print(shortcut_probe_accuracy(train))


# On the test split the shortcut tokens are random, so the captions of one image disagree.

# In[4]:

print(test.captions[7])


# Latent targets come from the semantic tokens only.

# In[5]:

cap = train.captions[7, 0]
print(cap, "->", semantic_tokens(cap, spec.n_attributes))
print(np.round(train.targets[7, 0][:6], 3))


# Relevance: the paired item, plus (in multi-positive mode) any image sharing at least 4 attributes.

# In[6]:

sizes = [len(s) // spec.k for s in annotations["multi"].i2t]
print(np.bincount(sizes))


# An epoch visits every (image, caption) pair once, shuffled by the epoch seed.

# In[7]:

batches = epoch_batches(train, 64, epoch_seed=3)
print([len(b) for b in batches][:5], sum(len(b) for b in batches), sum(b.duplicates for b in batches))
