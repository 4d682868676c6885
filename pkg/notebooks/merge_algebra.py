"""
Merging a separable residual into a frozen kernel
=================================================

A CoLoRA layer trains a pointwise kernel and a depthwise kernel beside a
frozen convolution.  Their product is a dense kernel with the base shape,
so after training it can be added into the base and the layer costs the
same as before.
"""

import numpy as np

from colora.adapters import Order, colora_forward, compose, make_colora, merge, reinit
from colora.tensor import ConvKernel, Tensor, conv2d

rng = np.random.default_rng(0)

# a frozen 3x3 convolution from 4 to 6 channels
base = ConvKernel(Tensor(rng.normal(size=(3, 3, 4, 6))), Tensor(rng.normal(size=6)))
layer = make_colora(base, order=Order.PW_THEN_DW, seed=1)
print("kp", layer.kp.shape, "kd", layer.kd.shape, "db", layer.db.shape)

# kd starts at zero, so the layer is exactly the base layer
x = Tensor(rng.normal(size=(2, 8, 8, 4)))
print("bit-equal at init:", np.array_equal(colora_forward(layer, x).data, conv2d(x, base).data))

# pretend some training happened
layer.kd.data = rng.normal(size=layer.kd.shape).astype(np.float32)
layer.db.data = rng.normal(size=layer.db.shape).astype(np.float32)

# the residual is one dense kernel: dK[..., c, t] = kp[c, t] * kd[..., t]
dk = compose(layer).weights.data
print("composed residual kernel", dk.shape, "rank of the centre tap", np.linalg.matrix_rank(dk[1, 1]))

before = colora_forward(layer, x).data
merge(layer)
after = conv2d(x, layer.base).data
print("relative deviation after merge: %.2e" % (np.abs(before - after).max() / np.abs(after).max()))

# merge leaves the factors alone; reinit starts a fresh residual
reinit(layer, seed=2)
print("residual zero again:", layer.residual_is_zero(), "merge count", layer.merge_count)

# repeated cycles accumulate: the base drifts by the sum of the composed kernels
k0 = layer.base.weights.data.astype(np.float64).copy()
total = np.zeros_like(k0)
for e in range(5):
    layer.kd.data = rng.normal(scale=0.1, size=layer.kd.shape).astype(np.float32)
    total += compose(layer).weights.data
    merge(layer)
    reinit(layer, seed=10 + e)
drift = np.abs(layer.base.weights.data - (k0 + total)).max() / np.abs(k0 + total).max()
print("5 cycles, deviation from K0 + sum of residuals: %.2e" % drift)
