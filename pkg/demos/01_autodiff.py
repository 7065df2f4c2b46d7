"""Walk through the tape-based autodiff core on a tiny convolution.

Run: python3 demos/01_autodiff.py
"""

import numpy as np

from kilnseg import ops
from kilnseg.gradcheck import grad_check
from kilnseg.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# a 1x2x6x6 input and a 3x3 kernel mapping 2 channels to 3
x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True, dtype=np.float64)

# operations run eagerly; the active tape records how to undo each one
with Tape() as tape:
    y = ops.relu(ops.conv2d(x, w, padding=1, dilation=2))
    loss = (y * y).mean()
print("ops recorded on the tape:", len(tape))
tape.backward(loss)
print("loss", float(loss.data), "| grad norms:", np.linalg.norm(x.grad), np.linalg.norm(w.grad))


# the same gradients against central differences in float64
def scalar():
    out = ops.relu(ops.conv2d(x, w, padding=1, dilation=2))
    return (out * out).mean()


err = grad_check(scalar, [x, w])
print(f"max relative error vs finite differences: {err:.2e}")
