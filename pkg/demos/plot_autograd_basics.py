"""
Reverse-mode differentiation by hand
====================================

A tour of the tensor type: build a small computation, run ``backward`` and
compare the result against central finite differences.
"""
import numpy as np

from ctsar import Tensor, backward
from ctsar import tensor as T
from ctsar.gradcheck import check_gradients

###############################################################################
# A tiny two-layer network
# ------------------------
# Every operation records its inputs and a gradient rule. ``backward`` sorts
# the recorded graph topologically and walks it in reverse.

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
w1 = Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
w2 = Tensor(rng.standard_normal((5, 2)), requires_grad=True, dtype=np.float64)


def net_loss(a, b):
    out = T.matmul(T.relu(T.matmul(x, a)), b)
    return T.mean(T.mul(out, out))


loss = net_loss(w1, w2)
grads = backward(loss, [w1, w2])
print("loss:", loss.item())
print("dL/dw2:\n", grads[id(w2)])

###############################################################################
# The recorded tape
# -----------------
# Leaves come first and the loss comes last.

for t in T.build_tape(loss):
    op = t._node.op if t._node else "leaf"
    print(f"{op:>10s} {t.shape}")

###############################################################################
# Checking against finite differences
# -----------------------------------
# The error is measured jointly over every input, relative to the largest
# gradient entry.

err = check_gradients(net_loss, [w1, w2])
print(f"max relative error: {err:.2e}")
