"""
Collapsing a multi-branch network into plain convolutions
=========================================================

Build a small enhancement network in its training form, let batch norm
collect statistics, then fuse every block and check that nothing changed.
"""

import numpy as np

from mobileie import MobileIENet, ModelConfig, fuse_network, param_count

rng = np.random.default_rng(0)

# a fresh network; one train-mode pass fills the running BN statistics
net = MobileIENet.init(ModelConfig(channels=12, variant="LLE"), seed=0)
net.forward(rng.random((4, 3, 32, 32)).astype(np.float32), mode="train")

# every block is folded into a single K x K kernel plus bias
fused = fuse_network(net)

counts_train = param_count(net)
counts_fused = param_count(fused)
print("layer          train   fused")
for name in counts_fused:
    print(f"{name:<14}{counts_train[name]:>6}  {counts_fused[name]:>6}")

# outputs agree to float32 rounding
x = rng.random((8, 3, 64, 64)).astype(np.float32)
gap = np.abs(net.forward(x) - fused.forward(x)).max()
print(f"\nmax |train - fused| over 8 images: {gap:.2e}")

# the stem kernel is now one 5x5 conv; its centre tap carries the 1x1 branch
stem = fused.stem.kernel
print("stem kernel", stem.shape, "centre-tap energy share:",
      round(float((stem[:, :, 2, 2] ** 2).sum() / (stem ** 2).sum()), 3))
