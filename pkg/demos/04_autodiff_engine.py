"""Tour of the reverse-mode engine: forward ops, the tape, gradients checked
against central finite differences, and an Adam descent on a small net.
"""

import numpy as np

from retrivox import tensor as T
from retrivox.nn import Conv3, Dense

# Build a graph; backward() accumulates gradients into the leaves and then
# releases the tape.
x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
loss = T.tsum(T.mul(T.relu(x), T.relu(x)))  # sum relu(x)^2
print("live tape nodes before backward:", T.live_tape_nodes())
T.backward(loss)
print("grad (expect 2x where x>0):", x.grad)
print("live tape nodes after backward:", T.live_tape_nodes())

# Every op's analytic gradient agrees with central finite differences in
# float64; the same harness guards the composed training losses.
rng = np.random.default_rng(0)
err = T.gradcheck(
    lambda a, w: T.mean(T.sigmoid(T.conv3(a, w, stride=2, pad=1))),
    [rng.normal(size=(1, 2, 6, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3))])
print(f"conv3+sigmoid gradcheck rel err: {err:.2e}")

# A two-layer net fit with Adam on a toy regression.
store = T.ParamStore()
l1 = Dense(store, "l1", 4, 16, rng=rng)
l2 = Dense(store, "l2", 16, 1, rng=rng)
xs = rng.normal(size=(64, 4)).astype(np.float32)
ys = (xs.sum(axis=1, keepdims=True) ** 2).astype(np.float32)
for step in range(200):
    pred = l2(T.leaky_relu(l1(T.Tensor(xs))))
    diff = T.sub(pred, T.Tensor(ys))
    loss = T.mean(T.mul(diff, diff))
    if step % 50 == 0:
        print(f"step {step}: mse {loss.item():.4f}")
    T.backward(loss)
    T.adam_step(store, lr=1e-2)
print(f"final mse: {loss.item():.4f}")

# Checkpoints carry parameters plus Adam moments and the step counter.
T.save_checkpoint(store, "/tmp/demo_net.rfc1")
print("checkpoint bytes:", open("/tmp/demo_net.rfc1", "rb").read(4))
