"""
Looking inside the spatial attention layer
==========================================

The attention layer starts as an exact identity because its gate is zero.
Opening the gate mixes every position with every other one, weighted by a
row-stochastic map.
"""
import numpy as np

from ctsar import Tensor
from ctsar.layers import SelfAttention

rng = np.random.default_rng(7)
layer = SelfAttention(16, rng=rng)
x = Tensor(rng.standard_normal((1, 16, 4, 4)).astype(np.float32))

###############################################################################
# Identity at initialisation
# --------------------------

print("identity while gamma == 0:", np.array_equal(layer(x).data, x.data))

###############################################################################
# The attention map
# -----------------
# Each of the 16 positions distributes one unit of weight over all 16.

a = layer.attention_map(x)[0]
print("row sums:", np.round(a.sum(axis=1), 6))
np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(a)

###############################################################################
# Opening the gate
# ----------------

layer.gamma.data[:] = 0.5
delta = layer(x).data - x.data
print("mean |change| with gamma = 0.5:", float(np.abs(delta).mean()))
