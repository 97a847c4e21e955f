"""Tour of the tape-based autodiff engine.

Builds a small computation, backpropagates it, and cross-checks every
gradient against central finite differences; then shows the conv1d /
conv1d_transpose adjoint identity that the encoder/decoder pair relies on.
"""

import numpy as np

from tselab import tensor as tt
from tselab.tensor import Tape, Tensor

rng = np.random.default_rng(0)

print("== a scalar chain: loss = sum(softmax(relu(x @ w)) * targets) ==")
x = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
w = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
targets = Tensor(rng.uniform(0, 1, (4, 3)))

with Tape() as tape:
    logits = tt.relu(tt.matmul(x, w))
    probs = tt.softmax(logits, axis=-1)
    loss = tt.tsum(tt.mul(probs, targets))
tape.backward(loss)
print(f"loss = {loss.item():.6f}")
print(f"dloss/dw row 0: {np.round(w.grad[0], 5)}")

print("\n== finite-difference check of dloss/dw ==")
step = 1e-5
numeric = np.zeros_like(w.data)
for i in range(w.data.size):
    for sign in (+1, -1):
        bumped = w.data.copy()
        bumped.reshape(-1)[i] += sign * step
        probs = tt.softmax(tt.relu(tt.matmul(Tensor(x.data), Tensor(bumped))), axis=-1)
        value = float(np.sum(probs.data * targets.data))
        numeric.reshape(-1)[i] += sign * value / (2 * step)
print(f"max |analytic - numeric| = {np.max(np.abs(w.grad - numeric)):.2e}")

print("\n== tape discipline ==")
try:
    tape.backward(loss)
except Exception as exc:
    print(f"second backward on the same tape -> {type(exc).__name__}: {exc}")

print("\n== conv1d and its exact adjoint ==")
signal = rng.standard_normal((1, 64))
kernels = rng.standard_normal((8, 1, 16))
encoded = tt.conv1d(Tensor(signal), Tensor(kernels), stride=8)
print(f"conv1d: input length 64, kernel 16, stride 8 -> {encoded.shape} frames")
cotangent = rng.standard_normal(encoded.shape)
back = tt.conv1d_transpose(Tensor(cotangent), Tensor(kernels), stride=8)
lhs = np.sum(encoded.data * cotangent)
rhs = np.sum(signal * back.data)
print(f"adjoint identity <conv(x), y> - <x, conv_T(y)> = {lhs - rhs:.2e}")
