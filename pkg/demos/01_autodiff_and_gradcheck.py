"""
Reverse-mode gradients and finite-difference checks
===================================================

A tour of the numpy autodiff core: build a small graph, backpropagate,
and confirm the analytic gradients against central differences.
"""
import numpy as np

from lacpanet import gradsuite
from lacpanet import tensor as T
from lacpanet.gradcheck import check_gradients

rng = np.random.default_rng(0)

# %%
# Tensors carry data, a grad slot, and the closure that routes gradients
# back to their parents.  Leaves ask for gradients explicitly.
x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = T.softmax_rows(T.matmul(x, w))
loss = T.sum(T.mul(y, y))
T.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# %%
# A 3x3x3 convolution over a single-channel volume.  The delta kernel
# returns its input unchanged, which is a quick sanity check.
vol = rng.normal(size=(1, 6, 6, 4))
delta = np.zeros((1, 1, 3, 3, 3))
delta[0, 0, 1, 1, 1] = 1.0
same = T.conv3d(T.Tensor(vol), T.Tensor(delta), T.Tensor(np.zeros(1)))
print("delta kernel is identity:", np.array_equal(same.data, vol))

# stride 2 halves every extent
down = T.conv3d(T.Tensor(vol), T.Tensor(rng.normal(size=(2, 1, 3, 3, 3))), T.Tensor(np.zeros(2)), stride=2)
print("stride-2 output shape", down.shape)

# %%
# check_gradients perturbs each input coordinate by +-h and compares the
# difference quotient with the backpropagated value.
inputs = {"x": rng.normal(size=(2, 4, 4, 4)), "kernel": rng.normal(size=(3, 2, 3, 3, 3)), "bias": rng.normal(size=3)}
readout = rng.normal(size=(3, 2, 2, 2))


def conv_readout(t):
    out = T.conv3d(t["x"], t["kernel"], t["bias"], stride=2)
    return T.sum(T.mul(out, T.Tensor(readout)))


print(check_gradients(conv_readout, inputs, op_name="conv3d_stride2").row())

# %%
# The packaged suite runs every differentiable op on several random
# instances plus the full two-head loss of a small model.
for row in gradsuite.run_suite(instances=2):
    print(row.row())
