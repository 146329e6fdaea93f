"""
Reverse-mode autodiff on numpy arrays
=====================================

Every model in the package is built from a small set of differentiable ops.
Here we build a tiny expression, backpropagate, and compare with central
finite differences.
"""
import numpy as np

from asc import numeric as nm
from asc.numeric import Tensor

rng = np.random.default_rng(0)

# a 4x3 input and a 3x2 weight, both tracked
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

# any scalar will do: here, normalized rows weighted by a softmax
h = nm.gelu(nm.matmul(x, w))
p = nm.softmax_rows(h)
loss = nm.sum(nm.mul(nm.l2_normalize_rows(h), p))
nm.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# the recorded graph, in evaluation order
for entry in nm.computation_record(loss):
    print(f"  {entry.op:<18} -> {entry.output}")

# finite differences agree to ~1e-10
err = nm.gradcheck(lambda a, b: nm.sum(nm.mul(nm.l2_normalize_rows(nm.gelu(nm.matmul(a, b))),
                                              nm.softmax_rows(nm.gelu(nm.matmul(a, b))))), [x, w])
print("max relative error vs finite differences:", err)

# inside no_grad nothing is recorded
with nm.no_grad():
    y = nm.matmul(x, w)
print("tracked under no_grad:", y.requires_grad, "| parents kept:", len(nm.computation_record(y)) > 1)
