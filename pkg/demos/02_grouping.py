"""
Grouping tokens into superpixels
================================

Tokens that are similar enough (S = Z Z^T above the threshold theta) are joined
by an edge; each connected component becomes one token.
"""
import numpy as np

from asc.grouping import (AscConfig, OpCount, asc_layer, binarize, components, gate, merge_max,
                          merge_mean, similarity, tome_partition)

rng = np.random.default_rng(1)

# 12 tokens in 4 dims drawn around two orthogonal directions
labels = rng.permutation(np.arange(12) % 2)
z = np.zeros((12, 4))
z[np.arange(12), labels] = 1.0
z += rng.uniform(-0.05, 0.05, z.shape)

s = similarity(z)
print("within-cluster similarity ~1, across ~0:\n", np.round(s.data[:4, :4], 2))

# sweep theta: few components when low, one per token when high
for theta in (-1.0, 0.0, 0.5, 0.99, 2.0):
    part = components(binarize(gate(s, theta)))
    print(f"theta {theta:5.2f} -> {part.count:2d} components")

# at a separating threshold the two clusters come out exactly
part = components(binarize(gate(s, 0.5)))
print("labels      ", part.labels)
print("true groups ", (labels != labels[0]).astype(int))

# merging: mean or elementwise max per component
print("mean-merged\n", np.round(merge_mean(z, part).data, 3))
print("max-merged\n", np.round(merge_max(z, part).data, 3))

# the layer does all of this, batched, and reports statistics
out = asc_layer(z, 0.5, AscConfig())
print("stats", out.stats)
print("surrogate term (the path that trains theta):", out.aux.item())

# ToMe-style alternative: merge a fixed number of pairs instead
print("ToMe r=4 ->", tome_partition(s.data, 4).count, "tokens")

# cost: N^2 d for the similarity, N^2 for thresholding, N + edges for the traversal
for n in (16, 32, 64, 128):
    c = OpCount()
    zz = rng.normal(size=(n, 16))
    components(binarize(gate(similarity(zz, c), 0.5), counter=c), c)
    print(f"N={n:4d} ops={c.total}")
