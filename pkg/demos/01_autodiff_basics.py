#!/usr/bin/env python3
"""Walk through the tensor kernels and the finite-difference gradient oracle.

Every kernel the fusion network uses carries a hand-derived backward pass;
this script shows the forward values, runs a backward pass, and then lets
the central-difference oracle judge the analytic gradients.
"""

import numpy as np

from traitfusion import ops
from traitfusion.gradcheck import grad_check
from traitfusion.tensor import ParamTensor, RngState, Tensor

# -- basic kernels -----------------------------------------------------------

x = Tensor([[1.0, -2.0, 3.0]])
print("relu:", ops.relu(x).array)

print("softmax of [0, 0]:", ops.softmax(Tensor([0.0, 0.0])).array)
print("softmax survives huge logits:", ops.softmax(Tensor([1000.0, 1000.0, 1000.0])).array)

gain = ParamTensor("ln.gain", np.ones(4))
bias = ParamTensor("ln.bias", np.zeros(4))
row = Tensor([[2.0, 4.0, 6.0, 8.0]])
normed = ops.layernorm(row, gain, bias)
print("layernorm row mean ~0:", normed.array.mean(), " variance ~1:", normed.array.var())

# split/concat are exact inverses, bit for bit
y = Tensor([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
parts = ops.split_lastdim(y, [2, 3, 1])
back = ops.concat_lastdim(parts)
print("concat(split(x)) bitwise identical:", np.array_equal(back.array, y.array))

# inverted dropout: eval mode is the identity, train mode rescales survivors
stream = RngState(42)
kept = ops.dropout(Tensor(np.ones(10)), 0.5, stream, training=True)
print("dropout (train, p=0.5):", kept.array)
print("dropout (eval) is identity:", ops.dropout(y, 0.5, stream, training=False) is y)

# -- backward pass -----------------------------------------------------------

w = ParamTensor("w", np.array([[0.5], [-0.25]]))
inputs = Tensor([[1.0, 2.0], [3.0, 4.0]])
target = Tensor([1.0, 0.0])
loss = ops.mse_loss(ops.reshape(ops.matmul(inputs, w), (2,)), target)
loss.backward()
print("\nloss:", loss.item())
print("dloss/dw:\n", w.value.grad)

# -- the oracle judges the analytic gradient ---------------------------------


def objective():
    h = ops.relu(ops.matmul(inputs, w))
    return ops.mse_loss(ops.reshape(h, (2,)), target)


report = grad_check(objective, [w], h=1e-5, tol=1e-6)
print("\ngrad_check report:")
print(report)
