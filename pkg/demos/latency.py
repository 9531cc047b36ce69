"""
Wall-clock cost of the two forms
================================

Time a forward pass of the training-form network against its fused twin on
a 600x400 frame, and compare with the multiply-accumulate count per pixel.
"""

import numpy as np

from mobileie import MobileIENet, ModelConfig, fuse_network
from mobileie.cli import time_forward

net = MobileIENet.init(ModelConfig(channels=12), seed=0)
net.forward(np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32), mode="train")
fused = fuse_network(net)

frame = np.random.default_rng(1).random((1, 3, 400, 600)).astype(np.float32)
t_train = time_forward(net, frame, iters=5)
t_fused = time_forward(fused, frame, iters=5)
print(f"train form {t_train.mean() * 1e3:7.1f} ms   fused {t_fused.mean() * 1e3:7.1f} ms"
      f"   speedup {t_train.mean() / t_fused.mean():.2f}x")

# per-pixel MACs of the spatial layers (the attention convs see a 1x1 map)
spatial = ["stem", "body0", "body1", "head"]
layers_t, layers_f = net.mbr_layers(), fused.mbr_layers()
macs_t = sum(sum(b.kernel.size for b in layers_t[n].branches) + layers_t[n].w_learn.size for n in spatial)
macs_f = sum(layers_f[n].kernel.size for n in spatial)
print(f"MACs per pixel: train {macs_t}, fused {macs_f}, ratio {macs_t / macs_f:.2f}")
