"""
Reverse-mode gradients and how they are checked
===============================================

A tiny tour of ``mvvt.tensor``: build a graph, call backward, then compare
against finite differences. Ends with the full verification suite.
"""

import numpy as np

from mvvt import tensor as T
from mvvt.gradcheck import format_results, run_suite
from mvvt.tensor import RngStream, Tensor

# a two-layer expression: y = sum(relu(x @ w) ** 2)
rng = RngStream(0)
x = Tensor(rng.normal((4, 3)))
w = Tensor(rng.normal((3, 2)), requires_grad=True)
h = T.relu(T.matmul(x, w))
y = T.sum_(T.mul(h, h))
T.backward(y)
print("loss", y.item())
print("dloss/dw\n", w.grad)

# the same gradient by central differences, one coordinate at a time
def f(w):
    h = T.relu(T.matmul(x, w))
    return T.sum_(T.mul(h, h))

print("max relative error vs finite differences:", T.grad_check(f, w))

# softmax rows sum to one
s = T.softmax(Tensor(rng.normal((2, 5))))
print("softmax row sums", s.data.sum(-1))

# every op, one attention block, the full model in both fusion modes and the
# naive-attention oracle; takes well under a minute on one core
results = run_suite()
print(format_results(results))
print("all passed:", all(r.passed for r in results))
