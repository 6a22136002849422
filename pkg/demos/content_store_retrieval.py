"""
Content store, retrieval and the contrastive terms
==================================================

Wild projections are kept in a fixed-size FIFO store. For each stylized
source embedding we retrieve its nearest stored entry and use it as an
extra positive. This script shows the store semantics and how the two
contrastive terms react to well- and badly-aligned embeddings.
"""

import numpy as np
import torch

from dgseg import ContentStore
from dgseg.losses import TAU, sce_loss, wce_loss

rng = np.random.default_rng(0)


def unit(n, d):
    x = rng.normal(size=(n, d)).astype(np.float32)
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


# %%
# FIFO behaviour: capacity 4, push 6 rows, the first two are evicted.
store = ContentStore(dim=3, capacity=4)
rows = torch.eye(3).repeat(2, 1)
store.push(rows)
print("entries after 6 pushes into capacity 4:\n", store.entries().numpy())
print("write cursor", store.write_cursor, "generation", store.generation)

# %%
# Retrieval is argmax of the dot product, i.e. cosine similarity on unit rows.
query = torch.tensor([[0.9, 0.1, 0.0]])
query = query / query.norm()
entry, idx = store.nearest(query)
print("nearest to", query.numpy().round(3), "->", entry.numpy(), "at logical index", int(idx))

# %%
# Contrastive terms on 16 anchors of 3 classes. Positives that point the
# same way as their anchors give small losses; random positives give large ones.
dim = 32
anchors = unit(16, dim)
labels = torch.tensor(rng.integers(0, 3, 16))
store = ContentStore(dim, 256)
store.push(unit(200, dim))


def jitter(x, scale):
    y = x + scale * unit(len(x), x.shape[1])
    return y / y.norm(dim=1, keepdim=True)


store.push(jitter(anchors, 0.05))  # near-copies of the anchors live in the store
aligned = jitter(anchors, 0.1)
scrambled = unit(16, dim)
for name, pos in [("aligned", aligned), ("scrambled", scrambled)]:
    sce = sce_loss(anchors, pos, labels, TAU)
    wce = wce_loss(anchors, pos, labels, store, TAU)
    print(f"{name:>9s}: SCE {float(sce):7.3f}   WCE {float(wce):7.3f}")
